//! Evaluation report types and their JSON / CSV forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::finetune::{FtEpoch, Strategy};
use super::metrics::MetricSummary;
use super::pretrain::{epoch_means, CurvePoint};
use crate::data::Task;
use crate::error::{Error, Result};

/// Argmax of validation AUROC; ties go to the linear probe.
pub fn select_strategy(scores: &[(Strategy, f64)]) -> Result<(Strategy, f64)> {
    let mut best: Option<(Strategy, f64)> = None;
    for &(s, v) in scores {
        if !v.is_finite() {
            return Err(Error::Metric(format!("validation AUROC for {s} is not finite")));
        }
        best = match best {
            Some((bs, bv)) if bv > v || (bv == v && bs <= s) => Some((bs, bv)),
            _ => Some((s, v)),
        };
    }
    best.ok_or_else(|| Error::Metric("no strategies to choose from".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub best_epoch: usize,
    pub val_auroc: f64,
    pub history: Vec<FtEpoch>,
    pub test: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub strategies: Vec<StrategyReport>,
    pub chosen: Strategy,
    pub chosen_val_auroc: f64,
    /// Test metrics of the chosen strategy.
    pub test: MetricSummary,
}

impl TaskReport {
    pub fn from_strategies(task: Task, strategies: Vec<StrategyReport>) -> Result<Self> {
        let scores: Vec<(Strategy, f64)> = strategies.iter().map(|s| (s.strategy, s.val_auroc)).collect();
        let (chosen, chosen_val_auroc) = select_strategy(&scores)?;
        let test = strategies
            .iter()
            .find(|s| s.strategy == chosen)
            .map(|s| s.test.clone())
            .expect("chosen strategy is present");
        Ok(Self {
            task,
            strategies,
            chosen,
            chosen_val_auroc,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCurve {
    pub epoch: usize,
    pub total: f64,
    pub global: Option<f64>,
    pub component: Option<f64>,
}

pub fn epoch_curves(curves: &[CurvePoint]) -> Vec<EpochCurve> {
    epoch_means(curves)
        .into_iter()
        .map(|(epoch, total, global, component)| EpochCurve {
            epoch,
            total,
            global,
            component,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub pretrained: bool,
    pub tasks: Vec<TaskReport>,
    /// Epoch means of the PT loss series; empty without PT.
    pub pt_epochs: Vec<EpochCurve>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Per-step loss series as CSV.
pub fn curves_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,batch,total,global,component\n");
    for c in curves {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.epoch,
            c.step,
            c.batch,
            c.total,
            opt(c.global),
            opt(c.component)
        );
    }
    out
}

/// One row per task and strategy.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "task,strategy,chosen,val_auroc,best_epoch,test_auroc,test_auroc_lower,test_auroc_upper,test_auprc,test_auprc_lower,test_auprc_upper\n",
    );
    for t in &report.tasks {
        for s in &t.strategies {
            let m = &s.test;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                t.task,
                s.strategy,
                s.strategy == t.chosen,
                s.val_auroc,
                s.best_epoch,
                m.auroc,
                m.auroc_ci.lower,
                m.auroc_ci.upper,
                m.auprc,
                m.auprc_ci.lower,
                m.auprc_ci.upper
            );
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
