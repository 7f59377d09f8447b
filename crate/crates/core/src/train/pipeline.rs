//! Data preparation and the PT -> FT -> test pipeline for one seed.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::{finetune, labels, predict};
use super::metrics::summarize;
use super::pretrain::{pretrain, CurvePoint, PretrainOptions};
use super::report::{epoch_curves, EvalReport, StrategyReport, TaskReport};
use super::TrainConfig;
use crate::augment::AugmentConfig;
use crate::data::{build_ft_dataset, DatasetSplit, DatasetStats, Task, Trajectory, VisitRecord};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{InputDims, Model, ModelConfig, ModelSpec, ParamStore};

/// A cohort split by patient, with statistics fitted on the development
/// patients and signals z-normalised with them.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub visits: Vec<VisitRecord>,
    pub split: DatasetSplit,
    pub stats: DatasetStats,
}

/// Labelled windows for one task, cut to the first view segment.
#[derive(Clone, Debug)]
pub struct FtData {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

fn crop_visit(v: &VisitRecord, p_view: usize) -> Result<VisitRecord> {
    let p = v.signal_len;
    if p_view == 0 || p_view > p {
        return Err(Error::Data(format!("segment of {p} samples is shorter than {p_view}")));
    }
    let c = v.signal_channels;
    let signals = v
        .signals
        .iter()
        .map(|s| -> Arc<[f32]> { (0..c).flat_map(|ch| s[ch * p..ch * p + p_view].iter().copied()).collect() })
        .collect();
    Ok(VisitRecord {
        signals,
        signal_len: p_view,
        ..v.clone()
    })
}

fn subsample<T: Clone>(items: Vec<T>, cap: Option<usize>, seed: u64) -> Vec<T> {
    match cap {
        Some(cap) if items.len() > cap => {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(cap);
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        }
        _ => items,
    }
}

impl Experiment {
    /// Standard patient split, then fit statistics on train + validation.
    pub fn prepare(raw: Vec<VisitRecord>, split_seed: u64) -> Result<Self> {
        let split = DatasetSplit::standard(&raw, split_seed)?;
        let stats = DatasetStats::fit(&DatasetSplit::select(&raw, &split.development()))?;
        let visits = raw.iter().map(|v| stats.normalize_signals(v)).collect();
        Ok(Self { visits, split, stats })
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            channels: self.stats.signal_channels,
            structured: self.stats.structured_mean.len(),
            static_features: self.stats.static_mean.len(),
        }
    }

    /// Unlabelled PT visits: the training patients.
    pub fn pt_visits(&self) -> Vec<VisitRecord> {
        DatasetSplit::select_owned(&self.visits, &self.split.train)
    }

    fn windows(&self, ids: &BTreeSet<String>, task: Task, p_view: usize, train: &TrainConfig) -> Result<Vec<Trajectory>> {
        let cropped = DatasetSplit::select(&self.visits, ids)
            .into_iter()
            .map(|v| crop_visit(v, p_view))
            .collect::<Result<Vec<_>>>()?;
        Ok(build_ft_dataset(&cropped, task, &self.stats, train.window)?.trajectories)
    }

    /// FT windows. Training labels come from a seeded `label_fraction` of
    /// the training patients; evaluation sets are optionally capped.
    pub fn ft_data(&self, task: Task, augment: &AugmentConfig, train: &TrainConfig, seed: u64) -> Result<FtData> {
        let p_view = augment.view_len(self.stats.sample_rate);
        let mut ids: Vec<String> = self.split.train.iter().cloned().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe));
        let keep = ((ids.len() as f64 * train.label_fraction).ceil() as usize).clamp(1, ids.len().max(1));
        let labelled: BTreeSet<String> = ids.into_iter().take(keep).collect();
        let out = FtData {
            train: self.windows(&labelled, task, p_view, train)?,
            val: subsample(
                self.windows(&self.split.validation, task, p_view, train)?,
                train.eval_max_windows,
                seed ^ 0x7a1,
            ),
            test: subsample(
                self.windows(&self.split.test, task, p_view, train)?,
                train.eval_max_windows,
                seed ^ 0x7e57,
            ),
        };
        for (name, set) in [("train", &out.train), ("validation", &out.val), ("test", &out.test)] {
            let y = labels(set)?;
            let pos = y.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == y.len() {
                return Err(Error::Data(format!("{task} {name} windows have a single class")));
            }
        }
        Ok(out)
    }
}

/// Everything a run needs besides data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub tasks: Vec<Task>,
    /// `false` fine-tunes from random initialisation.
    #[serde(default = "yes")]
    pub pretrain: bool,
}

fn yes() -> bool {
    true
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        Ok(())
    }
}

pub fn init_model(exp: &Experiment, plan: &RunPlan, seed: u64) -> Result<(Model, ParamStore)> {
    let spec = ModelSpec {
        config: plan.model.clone(),
        dims: exp.input_dims(),
        family: plan.loss.family,
    };
    Model::init(spec, seed)
}

/// Pre-train a freshly initialised model, or return it untouched when the
/// plan skips PT.
pub fn pretrain_stage(
    exp: &Experiment,
    plan: &RunPlan,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<(Model, ParamStore, Vec<CurvePoint>)> {
    let (model, mut store) = init_model(exp, plan, seed)?;
    if !plan.pretrain {
        return Ok((model, store, Vec::new()));
    }
    let visits = exp.pt_visits();
    let out = pretrain(
        &model,
        &mut store,
        &visits,
        &exp.stats,
        &plan.loss,
        &plan.augment,
        &plan.train,
        seed,
        opts,
    )?;
    Ok((model, store, out.curves))
}

/// Test metrics for a fitted model.
pub fn test_strategy(
    model: &Model,
    store: &ParamStore,
    data: &FtData,
    stats: &DatasetStats,
    resamples: usize,
    seed: u64,
) -> Result<super::metrics::MetricSummary> {
    if data.test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let scores = predict(model, store, &data.test, stats)?;
    summarize(&scores, &labels(&data.test)?, resamples, seed)
}

/// Fine-tune every strategy from the same starting weights, test each, and
/// pick by validation AUROC.
pub fn evaluate_task(
    exp: &Experiment,
    plan: &RunPlan,
    model: &Model,
    store: &ParamStore,
    task: Task,
    seed: u64,
) -> Result<TaskReport> {
    let data = exp.ft_data(task, &plan.augment, &plan.train, seed)?;
    let mut reports = Vec::new();
    for &strategy in &plan.train.strategies {
        let mut s = store.clone();
        let ft = finetune(model, &mut s, &data.train, &data.val, &exp.stats, strategy, &plan.train, seed)?;
        reports.push(StrategyReport {
            strategy,
            best_epoch: ft.best_epoch,
            val_auroc: ft.best_val_auroc,
            history: ft.history,
            test: test_strategy(model, &s, &data, &exp.stats, plan.train.bootstrap_resamples, seed)?,
        });
    }
    TaskReport::from_strategies(task, reports)
}

/// Outputs of [`run`].
pub struct RunOutput {
    pub model: Model,
    pub store: ParamStore,
    pub curves: Vec<CurvePoint>,
    pub report: EvalReport,
}

/// PT (unless disabled) then FT and test evaluation on every task.
pub fn run(exp: &Experiment, plan: &RunPlan, seed: u64, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    plan.validate()?;
    let opts = PretrainOptions {
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
        run_config: serde_json::to_value(plan)?,
        ..PretrainOptions::default()
    };
    let (model, store, curves) = pretrain_stage(exp, plan, seed, &opts)?;
    let tasks = plan
        .tasks
        .iter()
        .map(|&task| evaluate_task(exp, plan, &model, &store, task, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        seed,
        pretrained: plan.pretrain,
        tasks,
        pt_epochs: epoch_curves(&curves),
    };
    Ok(RunOutput {
        model,
        store,
        curves,
        report,
    })
}
