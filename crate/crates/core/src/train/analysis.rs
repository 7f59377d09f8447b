//! Component-weight sensitivity and per-stage representational similarity.

use serde::{Deserialize, Serialize};

use super::cka::cka;
use super::pipeline::{run, Experiment, RunPlan};
use crate::autodiff::Tensor;
use crate::data::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::models::{prefix, Model, ParamStore, Session};

/// The component-weight grid used for the sensitivity curve.
pub const BETA_GRID: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub seeds: usize,
    /// Means over seeds of the chosen strategy's scores.
    pub val_auroc: f64,
    pub test_auroc: f64,
    pub test_auroc_lower: f64,
    pub test_auroc_upper: f64,
}

/// Pre-train and fine-tune once per `(beta, seed)` with `alpha` as given in
/// the plan; one row per beta.
pub fn beta_sweep(exp: &Experiment, plan: &RunPlan, betas: &[f64], seeds: &[u64], task: Task) -> Result<Vec<SweepRow>> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta and one seed".into()));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut p = plan.clone();
        p.loss.beta = beta;
        p.tasks = vec![task];
        p.pretrain = true;
        let mut acc = [0.0; 4];
        for &seed in seeds {
            let out = run(exp, &p, seed, None)?;
            let t = &out.report.tasks[0];
            for (a, v) in acc
                .iter_mut()
                .zip([t.chosen_val_auroc, t.test.auroc, t.test.auroc_ci.lower, t.test.auroc_ci.upper])
            {
                *a += v;
            }
        }
        let k = seeds.len() as f64;
        rows.push(SweepRow {
            beta,
            seeds: seeds.len(),
            val_auroc: acc[0] / k,
            test_auroc: acc[1] / k,
            test_auroc_lower: acc[2] / k,
            test_auroc_upper: acc[3] / k,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,seeds,val_auroc,test_auroc,test_auroc_lower,test_auroc_upper\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.beta, r.seeds, r.val_auroc, r.test_auroc, r.test_auroc_lower, r.test_auroc_upper
        ));
    }
    out
}

/// Pooled stage activations of a model's signal encoder on every present
/// segment of the (normalised) probe set.
pub fn stage_activations(
    model: &Model,
    store: &ParamStore,
    probe: &[Trajectory],
) -> Result<Vec<Tensor>> {
    let first = probe.first().ok_or_else(|| Error::Data("empty probe set".into()))?;
    let (c, p) = (first.signal_channels, first.signal_len);
    let segments: Vec<&[f32]> = probe
        .iter()
        .flat_map(|t| t.signals.iter().zip(&t.signal_missing).filter(|(_, m)| !**m).map(|(s, _)| &**s))
        .collect();
    let mut per_stage: Vec<(usize, Vec<f64>)> = Vec::new();
    for chunk in segments.chunks(super::finetune::EVAL_CHUNK) {
        let data: Vec<f64> = chunk.iter().flat_map(|s| s.iter().map(|&x| f64::from(x))).collect();
        let x = Tensor::new(vec![chunk.len(), c, p], data)?;
        let mut s = Session::eval(store);
        let xv = s.graph.constant(x);
        let outs = model.signal_stage_features(&mut s, xv)?;
        if per_stage.is_empty() {
            per_stage = outs.iter().map(|&o| (s.value(o).dims2().map_or(0, |d| d.1), Vec::new())).collect();
        }
        for (acc, &o) in per_stage.iter_mut().zip(&outs) {
            acc.1.extend_from_slice(s.value(o).data());
        }
    }
    let n = segments.len();
    per_stage
        .into_iter()
        .map(|(w, d)| Tensor::new(vec![n, w], d))
        .collect()
}

/// `m[i][j] = CKA(a_i, b_j)`.
pub fn cka_matrix(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    a.iter().map(|x| b.iter().map(|y| cka(x, y)).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaRow {
    pub stage: usize,
    /// Mean CKA of this SMD stage against every stage of the other model.
    pub vs_component: f64,
    pub vs_global: f64,
    /// CKA against the same stage of the other model.
    pub vs_component_same_stage: f64,
    pub vs_global_same_stage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub rows: Vec<CkaRow>,
    pub smd_vs_component: Vec<Vec<f64>>,
    pub smd_vs_global: Vec<Vec<f64>>,
}

fn signal_layout(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix::SIGNAL))
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect()
}

/// Stage-by-stage similarity of the SMD encoder to the two single-level
/// encoders on a shared probe set.
pub fn cka_block_report(
    smd: (&Model, &ParamStore),
    component_only: (&Model, &ParamStore),
    global_only: (&Model, &ParamStore),
    probe: &[Trajectory],
) -> Result<CkaReport> {
    let layout = signal_layout(smd.1);
    for other in [component_only.1, global_only.1] {
        if signal_layout(other) != layout {
            return Err(Error::Config("signal encoders do not share an architecture".into()));
        }
    }
    let a = stage_activations(smd.0, smd.1, probe)?;
    let c = stage_activations(component_only.0, component_only.1, probe)?;
    let g = stage_activations(global_only.0, global_only.1, probe)?;
    let mc = cka_matrix(&a, &c)?;
    let mg = cka_matrix(&a, &g)?;
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let rows = (0..a.len())
        .map(|i| CkaRow {
            stage: i,
            vs_component: mean(&mc[i]),
            vs_global: mean(&mg[i]),
            vs_component_same_stage: mc[i][i],
            vs_global_same_stage: mg[i][i],
        })
        .collect();
    Ok(CkaReport {
        rows,
        smd_vs_component: mc,
        smd_vs_global: mg,
    })
}

pub fn cka_csv(report: &CkaReport) -> String {
    let mut out = String::from("stage,vs_component,vs_global,vs_component_same_stage,vs_global_same_stage\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.vs_component, r.vs_global, r.vs_component_same_stage, r.vs_global_same_stage
        ));
    }
    out
}
