//! Self-supervised pre-training on `alpha * L_G + beta * L_C`.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::augment::{make_view_pair, AugmentConfig};
use crate::autodiff::{ParamId, Var};
use crate::data::{DatasetStats, PtSampler, Trajectory, VisitRecord};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, component_loss_traced, global_loss, LogitTrace, LossConfig, ProjectionPair, StepProjections,
};
use crate::models::{apply_bn_updates, save_checkpoint, Batch, Level, Model, ParamStore, Session};

/// Loss nodes for one PT batch. Both terms are built whenever they are
/// defined so they can be logged; only weighted terms enter `total`.
#[derive(Clone, Copy, Debug)]
pub struct PtLoss {
    pub total: Var,
    pub global: Option<Var>,
    pub component: Option<Var>,
}

fn keep_degenerate(r: Result<Var>, weight: f64) -> Result<Option<Var>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateBatch(_)) if weight == 0.0 => Ok(None),
        Err(e) => Err(e),
    }
}

fn pair(s: &mut Session<'_>, h: Var, p: Option<Var>, start: usize, b: usize) -> Result<ProjectionPair> {
    let first = s.graph.slice_rows(h, start, b)?;
    let second = s.graph.slice_rows(h, start + b, b)?;
    Ok(match p {
        Some(p) => {
            let pa = s.graph.slice_rows(p, start, b)?;
            let pb = s.graph.slice_rows(p, start + b, b)?;
            ProjectionPair::with_predictions(first, second, pa, pb)
        }
        None => ProjectionPair::new(first, second),
    })
}

/// Build the PT objective for a batch holding `B` first views followed by
/// their `B` second views.
pub fn pretrain_objective(s: &mut Session<'_>, model: &Model, batch: &Batch, loss: &LossConfig) -> Result<PtLoss> {
    pretrain_objective_traced(s, model, batch, loss, None)
}

/// [`pretrain_objective`] recording the component loss's logit shapes.
pub fn pretrain_objective_traced(
    s: &mut Session<'_>,
    model: &Model,
    batch: &Batch,
    loss: &LossConfig,
    trace: Option<&mut LogitTrace>,
) -> Result<PtLoss> {
    if batch.n % 2 != 0 {
        return Err(Error::Shape("a PT batch holds first views then second views".into()));
    }
    let b = batch.n / 2;
    let norm = model.normalize_projections();
    let enc = model.encode_timesteps(s, batch)?;

    let z = model.encode_sequence(s, enc.timesteps, batch.n, batch.steps)?;
    let h = model.project(s, model.head(Level::Trajectory), z, norm)?;
    let p = match model.predictor(Level::Trajectory) {
        Some(head) => Some(model.project(s, head, h, false)?),
        None => None,
    };
    let traj = pair(s, h, p, 0, b)?;
    let global = keep_degenerate(global_loss(&mut s.graph, &traj, loss), loss.alpha)?;

    let hs = model.project(s, model.head(Level::Signal), enc.signal, norm)?;
    let ps = match model.predictor(Level::Signal) {
        Some(head) => Some(model.project(s, head, hs, false)?),
        None => None,
    };
    let mut steps = Vec::with_capacity(batch.steps);
    for t in 0..batch.steps {
        let base = t * batch.n;
        let rows: Vec<usize> = (0..b)
            .filter(|&i| !batch.missing[base + i] && !batch.missing[base + b + i])
            .collect();
        steps.push(StepProjections {
            pair: pair(s, hs, ps, base, b)?,
            rows: (rows.len() < b).then_some(rows),
        });
    }
    let component = keep_degenerate(component_loss_traced(&mut s.graph, &steps, loss, trace), loss.beta)?;
    let total = combined_loss(&mut s.graph, global, component, loss.alpha, loss.beta)?;
    Ok(PtLoss {
        total,
        global,
        component,
    })
}

/// Logged losses of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub total: f64,
    pub global: Option<f64>,
    pub component: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Parameters whose names start with any of these stay at their values
    /// (and their batch norms in eval mode).
    pub frozen_prefixes: Vec<String>,
    /// Where to write `epoch_NNN.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Run metadata stored in each checkpoint header.
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub curves: Vec<CurvePoint>,
    pub checkpoints: Vec<PathBuf>,
}

/// Epoch means of the logged series.
pub fn epoch_means(curves: &[CurvePoint]) -> Vec<(usize, f64, Option<f64>, Option<f64>)> {
    let mut out: Vec<(usize, f64, Option<f64>, Option<f64>)> = Vec::new();
    let mean = |xs: &[Option<f64>]| -> Option<f64> {
        let v: Vec<f64> = xs.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut i = 0;
    while i < curves.len() {
        let e = curves[i].epoch;
        let j = i + curves[i..].iter().take_while(|c| c.epoch == e).count();
        let chunk = &curves[i..j];
        let total = chunk.iter().map(|c| c.total).sum::<f64>() / chunk.len() as f64;
        let g: Vec<Option<f64>> = chunk.iter().map(|c| c.global).collect();
        let l: Vec<Option<f64>> = chunk.iter().map(|c| c.component).collect();
        out.push((e, total, mean(&g), mean(&l)));
        i = j;
    }
    out
}

fn trainable(store: &ParamStore, frozen: &[String]) -> Vec<ParamId> {
    store
        .trainable_ids()
        .filter(|&id| !frozen.iter().any(|p| store.entry(id).name.starts_with(p.as_str())))
        .collect()
}

/// Pre-train `store` in place on signal-normalised `visits`.
///
/// Every epoch redraws one window per block, shuffles, and walks full
/// batches; a trailing batch too small for the loss family is dropped.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &Model,
    store: &mut ParamStore,
    visits: &[VisitRecord],
    stats: &DatasetStats,
    loss: &LossConfig,
    augment: &AugmentConfig,
    train: &TrainConfig,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    loss.validate()?;
    augment.validate()?;
    train.validate()?;
    let sampler = PtSampler::new(visits, train.window)?;
    let ids = trainable(store, &opts.frozen_prefixes);
    let mut adam = Adam::new(train.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_batch = loss.family.min_batch().max(2);
    let mode = model.config().mode;
    let momentum = model.config().bn_momentum;
    let mut curves = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..train.pt_epochs {
        let mut trajs: Vec<Trajectory> = sampler.sample_epoch(visits, stats, &mut rng);
        trajs.shuffle(&mut rng);
        let mut batches: Vec<&[Trajectory]> = trajs
            .chunks(train.batch_size)
            .filter(|c| c.len() >= min_batch)
            .collect();
        if let Some(cap) = train.max_pt_steps_per_epoch {
            batches.truncate(cap);
        }
        if batches.is_empty() {
            return Err(Error::Data(format!(
                "{} PT trajectories cannot fill a batch of {min_batch}",
                trajs.len()
            )));
        }
        for (bi, chunk) in batches.into_iter().enumerate() {
            let mut firsts = Vec::with_capacity(chunk.len());
            let mut seconds = Vec::with_capacity(chunk.len());
            for tau in chunk {
                let v = make_view_pair(tau, augment, stats, &mut rng)?;
                firsts.push(v.first);
                seconds.push(v.second);
            }
            let views: Vec<&Trajectory> = firsts.iter().chain(seconds.iter()).collect();
            let batch = Batch::assemble(&views, stats, mode)?;

            let mut s = Session::train(store, ids.iter().copied());
            let out = match pretrain_objective(&mut s, model, &batch, loss) {
                Ok(out) => out,
                Err(e) if !s.graph.all_finite() => {
                    return Err(Error::Numeric(format!(
                        "non-finite activations at epoch {epoch} batch {bi}: {e}"
                    )))
                }
                Err(e) => return Err(e),
            };
            let read = |v: Option<Var>| v.map(|v| s.value(v).data()[0]);
            let point = CurvePoint {
                epoch,
                step: curves.len(),
                batch: bi,
                total: s.value(out.total).data()[0],
                global: read(out.global),
                component: read(out.component),
            };
            let weighted_finite = point.total.is_finite()
                && (loss.alpha == 0.0 || point.global.is_some_and(f64::is_finite))
                && (loss.beta == 0.0 || point.component.is_some_and(f64::is_finite));
            if !weighted_finite {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {bi}: total {}, global {:?}, component {:?}",
                    point.total, point.global, point.component
                )));
            }
            let grads = s.backward(out.total)?;
            let updates = s.into_bn_updates();
            adam.step(store, &grads);
            apply_bn_updates(store, &updates, momentum);
            curves.push(point);
        }
        if !store.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite during epoch {epoch}")));
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            let meta = serde_json::json!({ "epoch": epoch, "seed": seed, "run": opts.run_config });
            save_checkpoint(&path, store, model.checkpoint_config(meta)?)?;
            checkpoints.push(path);
        }
    }
    Ok(PretrainOutcome { curves, checkpoints })
}
