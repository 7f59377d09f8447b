//! Trajectory network: per-timestep encoders, a GRU over timesteps,
//! projection heads at trajectory and signal level, an optional SimSiam
//! predictor for each head, and a linear classifier.
//!
//! Batches are timestep-major: row `t * n + i` holds sequence `i` at
//! timestep `t`, so one encoder call covers every timestep of every view.

mod session;
mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use session::{apply_bn_updates, BnUpdate, Session};
pub use store::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, Entry, EntryKind,
    ParamStore, TensorRecord, CHECKPOINT_MAGIC,
};

use crate::autodiff::nn::{gru_cell, linear, GruWeights};
use crate::autodiff::{ParamId, Tensor, Var, NORM_EPS};
use crate::data::{DatasetStats, Trajectory};
use crate::error::{Error, Result};
use crate::losses::LossFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Static, structured and signal embeddings per timestep.
    Multimodal,
    /// Signal embedding only.
    Unimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub layers: usize,
    /// Width of every layer, including the output embedding.
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalEncoderConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub kernel: usize,
    /// Residual stages; every stage after the first halves the length.
    pub stages: Vec<StageConfig>,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub layers: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub output_dim: usize,
    pub batchnorm: bool,
    pub normalize_output_for_nt_xent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: InputMode,
    pub structured_encoder: MlpConfig,
    pub static_encoder: MlpConfig,
    pub signal_encoder: SignalEncoderConfig,
    pub sequence: SequenceConfig,
    pub heads: HeadConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-size layout: ResNet-18 style stages, 4x384 GRU, 2048-wide heads.
    pub fn full() -> Self {
        Self {
            mode: InputMode::Multimodal,
            structured_encoder: MlpConfig { layers: 2, hidden: 128 },
            static_encoder: MlpConfig { layers: 2, hidden: 128 },
            signal_encoder: SignalEncoderConfig {
                stem_channels: 64,
                stem_stride: 2,
                kernel: 15,
                stages: [64, 128, 256, 512]
                    .into_iter()
                    .map(|channels| StageConfig { channels, blocks: 2 })
                    .collect(),
                output_dim: 128,
            },
            sequence: SequenceConfig { layers: 4, hidden: 384 },
            heads: HeadConfig {
                hidden: 2048,
                output_dim: 128,
                batchnorm: true,
                normalize_output_for_nt_xent: true,
            },
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// CPU-sized layout: 4 residual blocks from 16 channels, 2x64 GRU,
    /// 128-wide heads.
    pub fn desk() -> Self {
        Self {
            structured_encoder: MlpConfig { layers: 2, hidden: 32 },
            static_encoder: MlpConfig { layers: 2, hidden: 32 },
            signal_encoder: SignalEncoderConfig {
                stem_channels: 16,
                stem_stride: 2,
                kernel: 7,
                stages: vec![StageConfig { channels: 16, blocks: 2 }, StageConfig { channels: 32, blocks: 2 }],
                output_dim: 64,
            },
            sequence: SequenceConfig { layers: 2, hidden: 64 },
            heads: HeadConfig {
                hidden: 128,
                output_dim: 64,
                batchnorm: true,
                normalize_output_for_nt_xent: true,
            },
            ..Self::full()
        }
    }

    /// Smallest layout that still exercises every layer type.
    pub fn tiny() -> Self {
        Self {
            structured_encoder: MlpConfig { layers: 2, hidden: 6 },
            static_encoder: MlpConfig { layers: 2, hidden: 4 },
            signal_encoder: SignalEncoderConfig {
                stem_channels: 3,
                stem_stride: 2,
                kernel: 5,
                stages: vec![StageConfig { channels: 3, blocks: 1 }, StageConfig { channels: 4, blocks: 1 }],
                output_dim: 5,
            },
            sequence: SequenceConfig { layers: 2, hidden: 6 },
            heads: HeadConfig {
                hidden: 8,
                output_dim: 4,
                batchnorm: true,
                normalize_output_for_nt_xent: true,
            },
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.signal_encoder;
        let positive = [
            self.structured_encoder.layers,
            self.structured_encoder.hidden,
            self.static_encoder.layers,
            self.static_encoder.hidden,
            s.stem_channels,
            s.stem_stride,
            s.kernel,
            s.output_dim,
            self.sequence.layers,
            self.sequence.hidden,
            self.heads.hidden,
            self.heads.output_dim,
        ];
        if positive.contains(&0) || s.stages.is_empty() || s.stages.iter().any(|st| st.channels == 0 || st.blocks == 0) {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        if s.kernel % 2 == 0 {
            return Err(Error::Config("signal encoder kernel must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("batch norm momentum must lie in [0, 1] and eps be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-timestep embedding fed to the GRU.
    pub fn timestep_dim(&self) -> usize {
        let sig = self.signal_encoder.output_dim;
        match self.mode {
            InputMode::Unimodal => sig,
            InputMode::Multimodal => sig + self.structured_encoder.hidden + self.static_encoder.hidden,
        }
    }
}

/// Input widths the network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub channels: usize,
    pub structured: usize,
    #[serde(rename = "static")]
    pub static_features: usize,
}

/// Everything needed to rebuild a parameter layout; echoed in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub family: LossFamily,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    w: ParamId,
    bn: BnIds,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Block {
    stage: usize,
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct SignalEncoder {
    stem: ConvBn,
    blocks: Vec<Block>,
    fc: LinearIds,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<LinearIds>,
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

/// Two-layer projection MLP.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    l1: LinearIds,
    bn: Option<BnIds>,
    l2: LinearIds,
}

/// Which projection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Trajectory,
    Signal,
}

/// Parameter layout of the full network. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    structured: Option<Mlp>,
    static_enc: Option<Mlp>,
    signal: SignalEncoder,
    gru: Vec<GruIds>,
    traj_head: Head,
    signal_head: Head,
    traj_pred: Option<Head>,
    signal_pred: Option<Head>,
    classifier: LinearIds,
}

/// Parameter name prefixes by component.
pub mod prefix {
    pub const STRUCTURED: &str = "structured.";
    pub const STATIC: &str = "static.";
    pub const SIGNAL: &str = "signal.";
    pub const GRU: &str = "gru.";
    pub const TRAJ_HEAD: &str = "head.trajectory.";
    pub const SIGNAL_HEAD: &str = "head.signal.";
    pub const TRAJ_PRED: &str = "predictor.trajectory.";
    pub const SIGNAL_PRED: &str = "predictor.signal.";
    pub const CLASSIFIER: &str = "classifier.";
    /// Everything that makes up `f_theta`.
    pub const ENCODER: [&str; 4] = [STRUCTURED, STATIC, SIGNAL, GRU];
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, EntryKind::Param, Tensor::new(shape.to_vec(), data)?)
    }

    /// Kaiming-uniform weights (ReLU gain) with fan-in bias bound.
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<LinearIds> {
        let w = self.uniform(format!("{name}.w"), &[d_in, d_out], (6.0 / d_in as f64).sqrt())?;
        let b = self.uniform(format!("{name}.b"), &[d_out], 1.0 / (d_in as f64).sqrt())?;
        Ok(LinearIds { w, b })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnIds> {
        Ok(BnIds {
            gamma: self.store.insert(format!("{name}.gamma"), EntryKind::Param, Tensor::full(&[c], 1.0))?,
            beta: self.store.insert(format!("{name}.beta"), EntryKind::Param, Tensor::zeros(&[c]))?,
            mean: self.store.insert(format!("{name}.running_mean"), EntryKind::Buffer, Tensor::zeros(&[c]))?,
            var: self
                .store
                .insert(format!("{name}.running_var"), EntryKind::Buffer, Tensor::full(&[c], 1.0))?,
        })
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<ConvBn> {
        let fan_in = (c_in * k) as f64;
        let w = self.uniform(format!("{name}.w"), &[c_out, c_in, k], (6.0 / fan_in).sqrt())?;
        Ok(ConvBn {
            w,
            bn: self.bn(&format!("{name}.bn"), c_out)?,
            stride,
            pad: k / 2,
        })
    }

    fn mlp(&mut self, name: &str, d_in: usize, cfg: &MlpConfig) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut d = d_in;
        for i in 0..cfg.layers {
            layers.push(self.linear(&format!("{name}{i}"), d, cfg.hidden)?);
            d = cfg.hidden;
        }
        Ok(Mlp { layers })
    }

    fn head(&mut self, name: &str, d_in: usize, cfg: &HeadConfig) -> Result<Head> {
        let l1 = self.linear(&format!("{name}l1"), d_in, cfg.hidden)?;
        let bn = if cfg.batchnorm {
            Some(self.bn(&format!("{name}bn"), cfg.hidden)?)
        } else {
            None
        };
        let l2 = self.linear(&format!("{name}l2"), cfg.hidden, cfg.output_dim)?;
        Ok(Head { l1, bn, l2 })
    }
}

impl Model {
    /// Build the layout and initialise parameters deterministically from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore)> {
        spec.config.validate()?;
        let cfg = &spec.config;
        let dims = spec.dims;
        if dims.channels == 0 {
            return Err(Error::Config("signal needs at least one channel".into()));
        }
        if cfg.mode == InputMode::Multimodal && (dims.structured == 0 || dims.static_features == 0) {
            return Err(Error::Config("multimodal mode needs structured and static features".into()));
        }
        let mut store = ParamStore::new(seed);
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (structured, static_enc) = match cfg.mode {
            InputMode::Multimodal => (
                Some(b.mlp("structured.l", dims.structured, &cfg.structured_encoder)?),
                Some(b.mlp("static.l", dims.static_features, &cfg.static_encoder)?),
            ),
            InputMode::Unimodal => (None, None),
        };

        let se = &cfg.signal_encoder;
        let k = se.kernel;
        let stem = b.conv_bn("signal.stem", dims.channels, se.stem_channels, k, se.stem_stride)?;
        let mut blocks = Vec::new();
        let mut c = se.stem_channels;
        for (si, stage) in se.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("signal.s{si}b{bi}");
                let conv1 = b.conv_bn(&format!("{name}.conv1"), c, stage.channels, k, stride)?;
                let conv2 = b.conv_bn(&format!("{name}.conv2"), stage.channels, stage.channels, k, 1)?;
                let shortcut = if stride != 1 || c != stage.channels {
                    Some(b.conv_bn(&format!("{name}.down"), c, stage.channels, 1, stride)?)
                } else {
                    None
                };
                blocks.push(Block {
                    stage: si,
                    conv1,
                    conv2,
                    shortcut,
                });
                c = stage.channels;
            }
        }
        let fc = b.linear("signal.fc", c, se.output_dim)?;

        let h = cfg.sequence.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut gru = Vec::with_capacity(cfg.sequence.layers);
        let mut d = cfg.timestep_dim();
        for l in 0..cfg.sequence.layers {
            gru.push(GruIds {
                w_ih: b.uniform(format!("gru.l{l}.w_ih"), &[d, 3 * h], bound)?,
                w_hh: b.uniform(format!("gru.l{l}.w_hh"), &[h, 3 * h], bound)?,
                b_ih: b.uniform(format!("gru.l{l}.b_ih"), &[3 * h], bound)?,
                b_hh: b.uniform(format!("gru.l{l}.b_hh"), &[3 * h], bound)?,
            });
            d = h;
        }

        let traj_head = b.head(prefix::TRAJ_HEAD, h, &cfg.heads)?;
        let signal_head = b.head(prefix::SIGNAL_HEAD, se.output_dim, &cfg.heads)?;
        let (traj_pred, signal_pred) = if spec.family == LossFamily::Simsiam {
            let p = cfg.heads.output_dim;
            (
                Some(b.head(prefix::TRAJ_PRED, p, &cfg.heads)?),
                Some(b.head(prefix::SIGNAL_PRED, p, &cfg.heads)?),
            )
        } else {
            (None, None)
        };
        let classifier = b.linear("classifier", h, 1)?;
        let model = Self {
            spec,
            structured,
            static_enc,
            signal: SignalEncoder { stem, blocks, fc },
            gru,
            traj_head,
            signal_head,
            traj_pred,
            signal_pred,
            classifier,
        };
        Ok((model, store))
    }

    /// Rebuild the layout for a checkpoint and load its tensors.
    pub fn from_checkpoint(header: &CheckpointHeader, loaded: &ParamStore) -> Result<(Self, ParamStore)> {
        let spec: ModelSpec = serde_json::from_value(
            header
                .config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint header has no model spec".into()))?,
        )?;
        let (model, mut store) = Self::init(spec, header.seed)?;
        if loaded.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, layout expects {}",
                loaded.len(),
                store.len()
            )));
        }
        let n = store.copy_matching(loaded, |_| true)?;
        if n != store.len() {
            return Err(Error::Checkpoint("checkpoint tensor names do not match the layout".into()));
        }
        Ok((model, store))
    }

    /// Header config for checkpoints of this model.
    pub fn checkpoint_config(&self, extra: serde_json::Value) -> Result<serde_json::Value> {
        Ok(serde_json::json!({ "model": serde_json::to_value(&self.spec)?, "run": extra }))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn family(&self) -> LossFamily {
        self.spec.family
    }

    pub fn normalize_projections(&self) -> bool {
        self.spec.config.heads.normalize_output_for_nt_xent && self.spec.family.normalizes()
    }

    pub fn head(&self, level: Level) -> Head {
        match level {
            Level::Trajectory => self.traj_head,
            Level::Signal => self.signal_head,
        }
    }

    pub fn predictor(&self, level: Level) -> Option<Head> {
        match level {
            Level::Trajectory => self.traj_pred,
            Level::Signal => self.signal_pred,
        }
    }

    /// Re-draw the classifier from `seed`, leaving everything else intact.
    pub fn reset_classifier(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = store.get(self.classifier.w).shape()[0] as f64;
        for (id, bound) in [(self.classifier.w, (6.0 / d_in).sqrt()), (self.classifier.b, 1.0 / d_in.sqrt())] {
            for x in store.get_mut(id).data_mut() {
                *x = rng.random_range(-bound..=bound);
            }
        }
    }

    /// Signal embeddings for `[rows, channels, samples]` input.
    pub fn encode_signal(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (h, _) = self.signal_trunk(s, x, false)?;
        let pooled = s.graph.global_avg_pool(h)?;
        apply_linear(s, &self.signal.fc, pooled)
    }

    /// Output of every residual stage of the signal encoder, average-pooled
    /// over time, `[rows, channels]` each.
    pub fn signal_stage_features(&self, s: &mut Session<'_>, x: Var) -> Result<Vec<Var>> {
        let (_, stages) = self.signal_trunk(s, x, true)?;
        Ok(stages)
    }

    fn signal_trunk(&self, s: &mut Session<'_>, x: Var, collect: bool) -> Result<(Var, Vec<Var>)> {
        let eps = self.spec.config.bn_eps;
        let enc = &self.signal;
        let mut h = conv_bn(s, &enc.stem, x, eps)?;
        h = s.graph.relu(h)?;
        let mut stages = Vec::new();
        for (i, blk) in enc.blocks.iter().enumerate() {
            let a = conv_bn(s, &blk.conv1, h, eps)?;
            let a = s.graph.relu(a)?;
            let a = conv_bn(s, &blk.conv2, a, eps)?;
            let skip = match &blk.shortcut {
                Some(sc) => conv_bn(s, sc, h, eps)?,
                None => h,
            };
            let sum = s.graph.add(a, skip)?;
            h = s.graph.relu(sum)?;
            let stage_ends = enc.blocks.get(i + 1).is_none_or(|next| next.stage != blk.stage);
            if collect && stage_ends {
                stages.push(s.graph.global_avg_pool(h)?);
            }
        }
        Ok((h, stages))
    }

    /// Per-timestep embeddings `z_t` for every row of the batch, plus the
    /// signal embeddings they contain.
    pub fn encode_timesteps(&self, s: &mut Session<'_>, batch: &Batch) -> Result<Encoded> {
        let x = s.graph.constant(batch.signals.clone());
        let signal = self.encode_signal(s, x)?;
        let z = match (self.spec.config.mode, &self.structured, &self.static_enc) {
            (InputMode::Multimodal, Some(st), Some(sf)) => {
                let (w, d) = match (&batch.structured, &batch.static_features) {
                    (Some(w), Some(d)) => (w.clone(), d.clone()),
                    _ => return Err(Error::Shape("multimodal batch needs structured and static inputs".into())),
                };
                let w = s.graph.constant(w);
                let ws = apply_mlp(s, st, w)?;
                let d = s.graph.constant(d);
                let ds = apply_mlp(s, sf, d)?;
                let rows: Vec<usize> = (0..batch.rows()).map(|r| r % batch.n).collect();
                let ds = s.graph.gather_rows(ds, &rows)?;
                s.graph.concat_cols(&[ws, ds, signal])?
            }
            _ => signal,
        };
        Ok(Encoded { signal, timesteps: z })
    }

    /// Run the GRU stack over timestep-major `z_t` and return the last
    /// hidden state of the top layer, `[n, hidden]`.
    pub fn encode_sequence(&self, s: &mut Session<'_>, z: Var, n: usize, steps: usize) -> Result<Var> {
        let (rows, _) = s.graph.value(z).dims2()?;
        if steps == 0 || rows != n * steps {
            return Err(Error::Shape(format!("{rows} timestep rows do not form {n} x {steps}")));
        }
        let h = self.spec.config.sequence.hidden;
        let mut seq: Vec<Var> = (0..steps)
            .map(|t| s.graph.slice_rows(z, t * n, n))
            .collect::<Result<_>>()?;
        for ids in &self.gru {
            let w = GruWeights {
                w_ih: s.p(ids.w_ih),
                w_hh: s.p(ids.w_hh),
                b_ih: s.p(ids.b_ih),
                b_hh: s.p(ids.b_hh),
            };
            let mut state = s.graph.constant(Tensor::zeros(&[n, h]));
            let mut out = Vec::with_capacity(steps);
            for &x in &seq {
                state = gru_cell(&mut s.graph, x, state, &w)?;
                out.push(state);
            }
            seq = out;
        }
        Ok(*seq.last().expect("steps >= 1"))
    }

    /// Trajectory embedding `z` for a batch.
    pub fn encode_trajectory(&self, s: &mut Session<'_>, batch: &Batch) -> Result<Var> {
        let enc = self.encode_timesteps(s, batch)?;
        self.encode_sequence(s, enc.timesteps, batch.n, batch.steps)
    }

    /// Projection head output; rows are unit-norm when `normalize` is set.
    pub fn project(&self, s: &mut Session<'_>, head: Head, x: Var, normalize: bool) -> Result<Var> {
        let h = apply_linear(s, &head.l1, x)?;
        let h = match &head.bn {
            Some(bn) => batch_norm(s, bn, h, self.spec.config.bn_eps)?,
            None => h,
        };
        let h = s.graph.relu(h)?;
        let out = apply_linear(s, &head.l2, h)?;
        if normalize {
            s.graph.l2_normalize_rows(out, NORM_EPS)
        } else {
            Ok(out)
        }
    }

    /// One logit per trajectory, `[n]`.
    pub fn classify(&self, s: &mut Session<'_>, z: Var) -> Result<Var> {
        let logit = apply_linear(s, &self.classifier, z)?;
        let (n, _) = s.graph.value(logit).dims2()?;
        s.graph.reshape(logit, &[n])
    }

    pub fn ids_with_prefix<'s>(&self, store: &'s ParamStore, prefixes: &'s [&'s str]) -> impl Iterator<Item = ParamId> + 's {
        store
            .trainable_ids()
            .filter(move |&id| prefixes.iter().any(|p| store.entry(id).name.starts_with(p)))
    }
}

fn apply_linear(s: &mut Session<'_>, ids: &LinearIds, x: Var) -> Result<Var> {
    let (w, b) = (s.p(ids.w), s.p(ids.b));
    linear(&mut s.graph, x, w, Some(b))
}

fn apply_mlp(s: &mut Session<'_>, mlp: &Mlp, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in mlp.layers.iter().enumerate() {
        h = apply_linear(s, l, h)?;
        if i + 1 < mlp.layers.len() {
            h = s.graph.relu(h)?;
        }
    }
    Ok(h)
}

fn batch_norm(s: &mut Session<'_>, bn: &BnIds, x: Var, eps: f64) -> Result<Var> {
    let (g, b) = (s.p(bn.gamma), s.p(bn.beta));
    if s.bn_train_mode(bn.gamma) {
        let (y, stats) = s.graph.batch_norm_train(x, g, b, eps)?;
        s.record_bn(BnUpdate {
            running_mean: bn.mean,
            running_var: bn.var,
            stats,
        });
        Ok(y)
    } else {
        let store = s.store();
        let (mean, var) = (store.get(bn.mean).data(), store.get(bn.var).data());
        s.graph.batch_norm_eval(x, g, b, mean, var, eps)
    }
}

fn conv_bn(s: &mut Session<'_>, c: &ConvBn, x: Var, eps: f64) -> Result<Var> {
    let w = s.p(c.w);
    let y = s.graph.conv1d(x, w, c.stride, c.pad)?;
    batch_norm(s, &c.bn, y, eps)
}

/// Encoder outputs for a batch, both `[T * n, _]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub signal: Var,
    pub timesteps: Var,
}

/// Model inputs for `n` sequences of `steps` timesteps, timestep-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub steps: usize,
    /// `[T * n, channels, samples]`
    pub signals: Tensor,
    /// Standardised `[T * n, M]`; `None` in unimodal mode.
    pub structured: Option<Tensor>,
    /// Standardised `[n, L]`; `None` in unimodal mode.
    pub static_features: Option<Tensor>,
    /// Missing-signal flag per row.
    pub missing: Vec<bool>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.n * self.steps
    }

    /// Assemble sequences into a timestep-major batch. Structured and
    /// static values are standardised with the training statistics.
    pub fn assemble(trajs: &[&Trajectory], stats: &DatasetStats, mode: InputMode) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (steps, c, p) = (first.steps(), first.signal_channels, first.signal_len);
        let (m, l) = (first.n_structured, first.n_static());
        for t in trajs {
            if t.steps() != steps || t.signal_channels != c || t.signal_len != p || t.n_structured != m || t.n_static() != l
            {
                return Err(Error::Shape(format!("trajectory {} does not match the batch shape", t.patient_id)));
            }
        }
        let n = trajs.len();
        let mut sig = Vec::with_capacity(steps * n * c * p);
        let mut missing = Vec::with_capacity(steps * n);
        for step in 0..steps {
            for t in trajs {
                sig.extend(t.signals[step].iter().map(|&x| f64::from(x)));
                missing.push(t.signal_missing[step]);
            }
        }
        let signals = Tensor::new(vec![steps * n, c, p], sig)?;
        let (structured, static_features) = match mode {
            InputMode::Unimodal => (None, None),
            InputMode::Multimodal => {
                if stats.structured_mean.len() != m || stats.static_mean.len() != l {
                    return Err(Error::Shape("statistics do not match the feature widths".into()));
                }
                let mut w = Vec::with_capacity(steps * n * m);
                for step in 0..steps {
                    for t in trajs {
                        let row = &t.structured[step * m..(step + 1) * m];
                        w.extend(row.iter().enumerate().map(|(j, x)| (x - stats.structured_mean[j]) / stats.structured_sd[j]));
                    }
                }
                let d: Vec<f64> = trajs
                    .iter()
                    .flat_map(|t| {
                        t.static_features
                            .iter()
                            .enumerate()
                            .map(|(j, x)| (x - stats.static_mean[j]) / stats.static_sd[j])
                    })
                    .collect();
                (Some(Tensor::new(vec![steps * n, m], w)?), Some(Tensor::new(vec![n, l], d)?))
            }
        };
        Ok(Self {
            n,
            steps,
            signals,
            structured,
            static_features,
            missing,
        })
    }
}

#[cfg(test)]
mod tests;
