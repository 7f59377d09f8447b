//! Per-modality stochastic views of a trajectory.
//!
//! Signals are cut into two disjoint segments, masked and jittered; the
//! structured series gets history cutout with forward filling plus noise;
//! static features get mean dropout plus noise. Structured and static noise
//! scales are fractions of the training-set feature standard deviations.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStats, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalAugment {
    pub mask_frac: f64,
    pub noise_sd: f64,
    pub segment_seconds: f64,
    /// Draw the two disjoint segments at random offsets instead of taking
    /// the first and second segment of the raw signal.
    #[serde(default)]
    pub random_placement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredAugment {
    pub cutout_prob: f64,
    pub cutout_frac: f64,
    pub noise_frac_of_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticAugment {
    pub dropout_frac: f64,
    pub noise_frac_of_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub signal: SignalAugment,
    pub structured: StructuredAugment,
    #[serde(rename = "static")]
    pub static_features: StaticAugment,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            signal: SignalAugment {
                mask_frac: 0.25,
                noise_sd: 0.25,
                segment_seconds: 10.0,
                random_placement: false,
            },
            structured: StructuredAugment {
                cutout_prob: 0.25,
                cutout_frac: 0.25,
                noise_frac_of_sd: 0.10,
            },
            static_features: StaticAugment {
                dropout_frac: 0.25,
                noise_frac_of_sd: 0.10,
            },
        }
    }
}

impl AugmentConfig {
    /// All masking and noise switched off.
    pub fn identity() -> Self {
        let mut c = Self::default();
        c.signal.mask_frac = 0.0;
        c.signal.noise_sd = 0.0;
        c.structured.cutout_prob = 0.0;
        c.structured.noise_frac_of_sd = 0.0;
        c.static_features.dropout_frac = 0.0;
        c.static_features.noise_frac_of_sd = 0.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("signal.mask_frac", self.signal.mask_frac),
            ("structured.cutout_prob", self.structured.cutout_prob),
            ("structured.cutout_frac", self.structured.cutout_frac),
            ("static.dropout_frac", self.static_features.dropout_frac),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment {name} = {v} must lie in [0, 1]")));
            }
        }
        let nonneg = [
            ("signal.noise_sd", self.signal.noise_sd),
            ("structured.noise_frac_of_sd", self.structured.noise_frac_of_sd),
            ("static.noise_frac_of_sd", self.static_features.noise_frac_of_sd),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augment {name} = {v} must be non-negative")));
            }
        }
        if !(self.signal.segment_seconds > 0.0) {
            return Err(Error::Config("augment signal.segment_seconds must be positive".into()));
        }
        Ok(())
    }

    /// Samples per view segment at `sample_rate`.
    pub fn view_len(&self, sample_rate: f64) -> usize {
        (self.signal.segment_seconds * sample_rate).round() as usize
    }
}

/// Two augmented views of one base trajectory. Signals have the view
/// segment length; everything else matches the base shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: Trajectory,
    pub second: Trajectory,
}

/// Source ranges and masked positions (per channel) of a signal pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SignalPairTrace {
    pub ranges: [Range<usize>; 2],
    pub masked: [Vec<Vec<usize>>; 2],
}

fn segment_ranges<R: Rng>(p_raw: usize, p_view: usize, random: bool, rng: &mut R) -> [Range<usize>; 2] {
    if !random {
        return [0..p_view, p_view..2 * p_view];
    }
    let last = p_raw - p_view;
    let a = rng.random_range(0..=last);
    loop {
        let b = rng.random_range(0..=last);
        if b + p_view <= a || a + p_view <= b {
            return [a..a + p_view, b..b + p_view];
        }
    }
}

/// Two disjoint masked, noised segments of a `channels x p_raw` signal.
pub fn augment_signal_pair<R: Rng>(
    s: &[f32],
    channels: usize,
    p_view: usize,
    cfg: &SignalAugment,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>)> {
    augment_signal_pair_traced(s, channels, p_view, cfg, rng).map(|(a, b, _)| (a, b))
}

pub fn augment_signal_pair_traced<R: Rng>(
    s: &[f32],
    channels: usize,
    p_view: usize,
    cfg: &SignalAugment,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>, SignalPairTrace)> {
    if channels == 0 || s.len() % channels != 0 {
        return Err(Error::Shape(format!("signal of {} samples is not {channels} channels", s.len())));
    }
    let p_raw = s.len() / channels;
    if p_view == 0 || p_raw < 2 * p_view {
        return Err(Error::Data(format!(
            "raw signal of {p_raw} samples cannot hold two {p_view}-sample segments"
        )));
    }
    let ranges = segment_ranges(p_raw, p_view, cfg.random_placement, rng);
    let n_mask = (cfg.mask_frac * p_view as f64).floor() as usize;
    let mut trace = SignalPairTrace {
        ranges: ranges.clone(),
        masked: Default::default(),
    };
    let mut views = [Vec::with_capacity(channels * p_view), Vec::with_capacity(channels * p_view)];
    for (v, range) in ranges.iter().enumerate() {
        for ch in 0..channels {
            let base = ch * p_raw;
            let mut seg = s[base + range.start..base + range.end].to_vec();
            let mut idx = index::sample(rng, p_view, n_mask).into_vec();
            for &i in &idx {
                seg[i] = 0.0;
            }
            if cfg.noise_sd > 0.0 {
                for x in &mut seg {
                    *x = (f64::from(*x) + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
            }
            idx.sort_unstable();
            trace.masked[v].push(idx);
            views[v].extend_from_slice(&seg);
        }
    }
    let [a, b] = views;
    Ok((a, b, trace))
}

/// History cutout on a `T x M` row-major series, returning the masked
/// timesteps per feature.
pub fn augment_structured_traced<R: Rng>(
    w: &[f64],
    steps: usize,
    cfg: &StructuredAugment,
    stats: &DatasetStats,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let m = stats.structured_mean.len();
    if w.len() != steps * m {
        return Err(Error::Shape(format!("structured series has {} values, expected {steps}x{m}", w.len())));
    }
    let n_cut = (cfg.cutout_frac * steps as f64).floor() as usize;
    let mut out = w.to_vec();
    let mut masked = vec![Vec::new(); m];
    for j in 0..m {
        if rng.random::<f64>() >= cfg.cutout_prob || n_cut == 0 {
            continue;
        }
        let mut idx = index::sample(rng, steps, n_cut).into_vec();
        idx.sort_unstable();
        let mut hidden = vec![false; steps];
        for &t in &idx {
            hidden[t] = true;
        }
        let col: Vec<f64> = (0..steps).map(|t| w[t * m + j]).collect();
        let lead = hidden
            .iter()
            .position(|h| !h)
            .map_or(stats.structured_mean[j], |t| col[t]);
        let mut last = lead;
        for t in 0..steps {
            if hidden[t] {
                out[t * m + j] = last;
            } else {
                last = col[t];
            }
        }
        masked[j] = idx;
    }
    if cfg.noise_frac_of_sd > 0.0 {
        for t in 0..steps {
            for j in 0..m {
                out[t * m + j] += cfg.noise_frac_of_sd * stats.structured_sd[j] * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok((out, masked))
}

pub fn augment_structured<R: Rng>(
    w: &[f64],
    steps: usize,
    cfg: &StructuredAugment,
    stats: &DatasetStats,
    rng: &mut R,
) -> Result<Vec<f64>> {
    augment_structured_traced(w, steps, cfg, stats, rng).map(|(w, _)| w)
}

/// Mean dropout on static features, returning the dropped indices.
pub fn augment_static_traced<R: Rng>(
    d: &[f64],
    cfg: &StaticAugment,
    stats: &DatasetStats,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let l = stats.static_mean.len();
    if d.len() != l {
        return Err(Error::Shape(format!("static vector has {} features, expected {l}", d.len())));
    }
    let n_drop = (cfg.dropout_frac * l as f64).floor() as usize;
    let mut idx = index::sample(rng, l, n_drop).into_vec();
    idx.sort_unstable();
    let mut out = d.to_vec();
    for &j in &idx {
        out[j] = stats.static_mean[j];
    }
    if cfg.noise_frac_of_sd > 0.0 {
        for (x, sd) in out.iter_mut().zip(&stats.static_sd) {
            *x += cfg.noise_frac_of_sd * sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((out, idx))
}

pub fn augment_static<R: Rng>(d: &[f64], cfg: &StaticAugment, stats: &DatasetStats, rng: &mut R) -> Result<Vec<f64>> {
    augment_static_traced(d, cfg, stats, rng).map(|(d, _)| d)
}

fn with_signals(base: &Trajectory, signals: Vec<Arc<[f32]>>, p_view: usize) -> Trajectory {
    Trajectory {
        signals,
        signal_len: p_view,
        ..base.clone()
    }
}

/// Two independently augmented views. Missing-signal timesteps carry zero
/// segments in both views and keep the missing mask.
pub fn make_view_pair<R: Rng>(
    tau: &Trajectory,
    cfg: &AugmentConfig,
    stats: &DatasetStats,
    rng: &mut R,
) -> Result<ViewPair> {
    let p_view = cfg.view_len(tau.sample_rate);
    let c = tau.signal_channels;
    let zero: Arc<[f32]> = vec![0.0f32; c * p_view].into();
    let mut sig = [Vec::with_capacity(tau.steps()), Vec::with_capacity(tau.steps())];
    for (seg, &missing) in tau.signals.iter().zip(&tau.signal_missing) {
        if missing {
            if tau.signal_len < 2 * p_view {
                return Err(Error::Data("raw signal cannot hold two segments".into()));
            }
            sig[0].push(zero.clone());
            sig[1].push(zero.clone());
            continue;
        }
        let (a, b) = augment_signal_pair(seg, c, p_view, &cfg.signal, rng)?;
        sig[0].push(a.into());
        sig[1].push(b.into());
    }
    let [s0, s1] = sig;
    let mut views = Vec::with_capacity(2);
    for s in [s0, s1] {
        let mut v = with_signals(tau, s, p_view);
        v.structured = augment_structured(&tau.structured, tau.steps(), &cfg.structured, stats, rng)?;
        v.static_features = augment_static(&tau.static_features, &cfg.static_features, stats, rng)?;
        views.push(v);
    }
    let second = views.pop().expect("two views");
    let first = views.pop().expect("two views");
    Ok(ViewPair { first, second })
}

/// Un-augmented view for fine-tuning and evaluation: the first segment of
/// every timestep's signal.
pub fn first_segment(tau: &Trajectory, cfg: &AugmentConfig) -> Result<Trajectory> {
    let p_view = cfg.view_len(tau.sample_rate);
    let c = tau.signal_channels;
    let p_raw = tau.signal_len;
    if p_view == 0 || p_raw < p_view {
        return Err(Error::Data(format!("raw signal of {p_raw} samples is shorter than {p_view}")));
    }
    if p_raw == p_view {
        return Ok(tau.clone());
    }
    let signals = tau
        .signals
        .iter()
        .map(|s| {
            (0..c)
                .flat_map(|ch| s[ch * p_raw..ch * p_raw + p_view].iter().copied())
                .collect::<Vec<f32>>()
                .into()
        })
        .collect();
    Ok(with_signals(tau, signals, p_view))
}
