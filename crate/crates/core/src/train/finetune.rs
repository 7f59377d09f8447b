//! Supervised fine-tuning of the classifier, alone or with the encoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::{Adam, TrainConfig};
use crate::autodiff::{Graph, ParamId, Tensor, Var};
use crate::data::{DatasetStats, Trajectory};
use crate::error::{Error, Result};
use crate::models::{apply_bn_updates, prefix, Batch, Model, ParamStore, Session};

/// Rows per inference batch.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Classifier on frozen representations.
    Linear,
    /// Everything trainable, classifier re-initialised.
    FullFt,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Strategy::Linear),
            "full_ft" => Ok(Strategy::FullFt),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Linear => "linear",
            Strategy::FullFt => "full_ft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub strategy: Strategy,
    pub history: Vec<FtEpoch>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

pub fn labels(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    trajs
        .iter()
        .map(|t| {
            t.label
                .ok_or_else(|| Error::Data(format!("window of {} has no label", t.patient_id)))
        })
        .collect()
}

/// Mean binary cross-entropy on logits.
pub fn logistic_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let y = g.constant(Tensor::new(vec![labels.len()], labels.iter().map(|&l| f64::from(l)).collect())?);
    let sp = g.softplus(logits)?;
    let yl = g.mul(y, logits)?;
    let per = g.sub(sp, yl)?;
    g.mean(per)
}

fn refs<'a>(trajs: &'a [Trajectory], idx: &[usize]) -> Vec<&'a Trajectory> {
    idx.iter().map(|&i| &trajs[i]).collect()
}

/// Trajectory embeddings from a frozen encoder, `[n, hidden]`.
pub fn features(model: &Model, store: &ParamStore, trajs: &[Trajectory], stats: &DatasetStats) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in trajs.chunks(EVAL_CHUNK) {
        let batch = Batch::assemble(&chunk.iter().collect::<Vec<_>>(), stats, model.config().mode)?;
        let mut s = Session::eval(store);
        let z = model.encode_trajectory(&mut s, &batch)?;
        width = s.value(z).dims2()?.1;
        data.extend_from_slice(s.value(z).data());
    }
    Tensor::new(vec![trajs.len(), width], data)
}

/// Classifier logits in eval mode.
pub fn predict(model: &Model, store: &ParamStore, trajs: &[Trajectory], stats: &DatasetStats) -> Result<Vec<f64>> {
    if trajs.is_empty() {
        return Err(Error::Data("nothing to predict".into()));
    }
    let z = features(model, store, trajs, stats)?;
    logits_from_features(model, store, &z)
}

fn logits_from_features(model: &Model, store: &ParamStore, z: &Tensor) -> Result<Vec<f64>> {
    let mut s = Session::eval(store);
    let x = s.graph.constant(z.clone());
    let y = model.classify(&mut s, x)?;
    Ok(s.value(y).data().to_vec())
}

fn gather(z: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = z.dims2()?;
    Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| z.row(i).iter().copied()).collect())
}

/// Fine-tune `store` in place and leave it at the epoch with the best
/// validation AUROC. The classifier is re-drawn from `seed` first.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &Model,
    store: &mut ParamStore,
    train: &[Trajectory],
    val: &[Trajectory],
    stats: &DatasetStats,
    strategy: Strategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let y_train = labels(train)?;
    let y_val = labels(val)?;
    let val_pos = y_val.iter().filter(|&&l| l == 1).count();
    if val.is_empty() || val_pos == 0 || val_pos == y_val.len() {
        return Err(Error::Metric("validation set has a single class, AUROC is undefined".into()));
    }
    if train.len() < 2 {
        return Err(Error::Data("fine-tuning needs at least two labelled windows".into()));
    }
    model.reset_classifier(store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.optimizer.clone());
    let momentum = model.config().bn_momentum;

    let frozen = match strategy {
        Strategy::Linear => Some((features(model, store, train, stats)?, features(model, store, val, stats)?)),
        Strategy::FullFt => None,
    };
    let prefixes: Vec<&str> = match strategy {
        Strategy::Linear => vec![prefix::CLASSIFIER],
        Strategy::FullFt => prefix::ENCODER.iter().copied().chain([prefix::CLASSIFIER]).collect(),
    };
    let ids: Vec<ParamId> = model.ids_with_prefix(store, &prefixes).collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.ft_max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let y: Vec<u8> = idx.iter().map(|&i| y_train[i]).collect();
            let mut s = Session::train(store, ids.iter().copied());
            let z = match &frozen {
                Some((zt, _)) => s.graph.constant(gather(zt, idx)?),
                None => {
                    let batch = Batch::assemble(&refs(train, idx), stats, model.config().mode)?;
                    model.encode_trajectory(&mut s, &batch)?
                }
            };
            let logits = model.classify(&mut s, z)?;
            let loss = logistic_loss(&mut s.graph, logits, &y)?;
            let lv = s.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite FT loss at epoch {epoch}")));
            }
            let grads = s.backward(loss)?;
            let updates = s.into_bn_updates();
            adam.step(store, &grads);
            apply_bn_updates(store, &updates, momentum);
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let scores = match &frozen {
            Some((_, zv)) => logits_from_features(model, store, zv)?,
            None => predict(model, store, val, stats)?,
        };
        let val_auroc = auroc(&scores, &y_val)?;
        history.push(FtEpoch {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_auroc,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_auroc > *b) {
            best = Some((epoch, val_auroc, store.clone()));
        } else if let Some(p) = cfg.ft_patience {
            if epoch - best.as_ref().map_or(0, |b| b.0) >= p {
                break;
            }
        }
    }
    let (best_epoch, best_val_auroc, best_store) = best.expect("at least one epoch");
    *store = best_store;
    Ok(FinetuneOutcome {
        strategy,
        history,
        best_epoch,
        best_val_auroc,
    })
}
