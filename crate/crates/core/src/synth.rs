//! Synthetic cohort with a known scalar health state.
//!
//! Each patient carries a latent `x_t` following a stationary Gaussian AR(1)
//! around a patient-specific level; health is `h_t = sigmoid(x_t)`. Signals,
//! structured and static features, pressure and mortality are all driven by
//! `h_t`. The latent path is returned next to the visits for oracle checks.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::sigmoid;
use crate::data::{VisitLabels, VisitRecord, ELEVATED_MAP_THRESHOLD_MMHG};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    /// Mean of the patient-level AR(1) mean on the logit scale.
    pub level_mean: f64,
    /// Between-patient spread of that mean.
    pub level_sd: f64,
    /// AR(1) coefficient, in (-1, 1).
    pub phi: f64,
    /// Innovation standard deviation.
    pub innovation_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub channels: usize,
    pub sample_rate: f64,
    pub seconds: f64,
    pub harmonics: usize,
    /// Fundamental frequency at h = 0 and h = 1 (Hz).
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Fundamental amplitude at h = 0 and h = 1; harmonic k is scaled by 1/k.
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub noise_sd: f64,
    /// Probability that an hour's segment is missing.
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub n_features: usize,
    pub noise_sd: f64,
    /// Per-entry probability of an unobserved value.
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    /// Health level above which pressure exceeds the elevated threshold.
    pub elevated_threshold: f64,
    /// mmHg per unit of health.
    pub map_scale: f64,
    /// Hourly hazard at h = 1.
    pub base_hazard: f64,
    /// Log-hazard slope in `1 - h`.
    pub hazard_slope: f64,
    /// Hours after visit end over which death is still recorded.
    pub follow_up_hours: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub hours_min: usize,
    pub hours_max: usize,
    pub latent: LatentSpec,
    pub signal: SignalSpec,
    pub structured: FeatureSpec,
    #[serde(rename = "static")]
    pub static_features: FeatureSpec,
    pub labels: LabelSpec,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            hours_min: 24,
            hours_max: 48,
            latent: LatentSpec {
                level_mean: 0.5,
                level_sd: 0.6,
                phi: 0.9,
                innovation_sd: 0.3,
            },
            signal: SignalSpec {
                channels: 1,
                sample_rate: 125.0,
                seconds: 30.0,
                harmonics: 3,
                freq_lo: 0.8,
                freq_hi: 2.5,
                amp_lo: 1.0,
                amp_hi: 0.6,
                noise_sd: 0.5,
                missing_rate: 0.03,
            },
            structured: FeatureSpec {
                n_features: 6,
                noise_sd: 1.0,
                missing_rate: 0.2,
            },
            static_features: FeatureSpec {
                n_features: 4,
                noise_sd: 1.0,
                missing_rate: 0.5,
            },
            labels: LabelSpec {
                elevated_threshold: 0.47,
                map_scale: 30.0,
                base_hazard: 8.0e-5,
                hazard_slope: 5.0,
                follow_up_hours: 24,
            },
            seed: 0,
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cohort spec: {m}")));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if self.hours_min == 0 || self.hours_min > self.hours_max {
            return bad("need 1 <= hours_min <= hours_max");
        }
        let l = &self.latent;
        if !(l.phi.abs() < 1.0) || !(l.level_sd >= 0.0) || !(l.innovation_sd >= 0.0) || !l.level_mean.is_finite() {
            return bad("latent needs |phi| < 1 and non-negative spreads");
        }
        let s = &self.signal;
        if s.channels == 0 || s.harmonics == 0 || !(s.sample_rate > 0.0) || !(s.seconds > 0.0) {
            return bad("signal needs positive channels, harmonics, sample_rate and seconds");
        }
        if s.segment_len() == 0 {
            return bad("signal segment has no samples");
        }
        if !(s.freq_lo > 0.0 && s.freq_lo < s.freq_hi) {
            return bad("need 0 < freq_lo < freq_hi");
        }
        if s.harmonics as f64 * s.freq_hi >= s.sample_rate / 2.0 {
            return bad("highest harmonic must stay below the Nyquist frequency");
        }
        if !(s.noise_sd >= 0.0) || !unit(s.missing_rate) || !(s.amp_lo >= 0.0) || !(s.amp_hi >= 0.0) {
            return bad("signal amplitudes and noise must be non-negative, missing_rate in [0, 1]");
        }
        for (name, f) in [("structured", &self.structured), ("static", &self.static_features)] {
            if !(f.noise_sd >= 0.0) || !unit(f.missing_rate) {
                return Err(Error::Config(format!(
                    "cohort spec: {name} noise must be non-negative and missing_rate in [0, 1]"
                )));
            }
        }
        let lb = &self.labels;
        if !(lb.elevated_threshold > 0.0 && lb.elevated_threshold < 1.0) {
            return bad("elevated_threshold must lie in (0, 1)");
        }
        if !(lb.map_scale > 0.0) || !(lb.base_hazard >= 0.0) || !lb.hazard_slope.is_finite() {
            return bad("map_scale must be positive and base_hazard non-negative");
        }
        if lb.base_hazard * lb.hazard_slope.max(0.0).exp() > 1e3 {
            return bad("hazard overflows");
        }
        Ok(())
    }

    /// Stationary marginal standard deviation of the latent `x_t`.
    pub fn latent_marginal_sd(&self) -> f64 {
        let l = &self.latent;
        (l.level_sd.powi(2) + l.innovation_sd.powi(2) / (1.0 - l.phi * l.phi)).sqrt()
    }

    /// Closed-form `P(h_t > threshold)` under the stationary marginal, the
    /// elevated-pressure prevalence at any timestep.
    pub fn analytic_elevated_prevalence(&self) -> f64 {
        let thr = self.labels.elevated_threshold;
        let logit = (thr / (1.0 - thr)).ln();
        let sd = self.latent_marginal_sd();
        if sd == 0.0 {
            return if self.latent.level_mean > logit { 1.0 } else { 0.0 };
        }
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        1.0 - n.cdf((logit - self.latent.level_mean) / sd)
    }

    /// Pressure reading for a health level; crosses the elevated threshold
    /// exactly at `elevated_threshold`.
    pub fn map_mean(&self, h: f64) -> f64 {
        ELEVATED_MAP_THRESHOLD_MMHG + self.labels.map_scale * (h - self.labels.elevated_threshold)
    }

    /// Hourly death probability at health `h`.
    pub fn death_probability(&self, h: f64) -> f64 {
        1.0 - (-self.labels.base_hazard * (self.labels.hazard_slope * (1.0 - h)).exp()).exp()
    }
}

impl SignalSpec {
    pub fn segment_len(&self) -> usize {
        (self.seconds * self.sample_rate).round() as usize
    }

    pub fn fundamental(&self, h: f64) -> f64 {
        self.freq_lo + (self.freq_hi - self.freq_lo) * h
    }

    /// One `channels x samples` segment at health `h` with random phases.
    pub fn segment<R: Rng>(&self, h: f64, rng: &mut R) -> Vec<f32> {
        let p = self.segment_len();
        let f0 = self.fundamental(h);
        let amp = self.amp_lo + (self.amp_hi - self.amp_lo) * h;
        let mut out = vec![0.0f32; self.channels * p];
        for ch in 0..self.channels {
            let gain = 1.0 + 0.2 * ch as f64;
            let phases: Vec<f64> = (0..self.harmonics).map(|_| rng.random::<f64>() * TAU).collect();
            for (n, y) in out[ch * p..(ch + 1) * p].iter_mut().enumerate() {
                let t = n as f64 / self.sample_rate;
                let mut v = 0.0;
                for (k, ph) in phases.iter().enumerate() {
                    let k = (k + 1) as f64;
                    v += amp * gain / k * (TAU * k * f0 * t + ph).sin();
                }
                if self.noise_sd > 0.0 {
                    v += self.noise_sd * rng.sample::<f64, _>(StandardNormal);
                }
                *y = v as f32;
            }
        }
        out
    }
}

/// Affine map `a + b h` for one feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

impl Affine {
    pub fn at(&self, h: f64) -> f64 {
        self.intercept + self.slope * h
    }
}

/// Ground truth for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientLatent {
    pub patient_id: String,
    /// Patient-level AR(1) mean on the logit scale.
    pub level: f64,
    /// Health per visit hour.
    pub health: Vec<f64>,
}

/// Generated visits with the latent state kept out of the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub visits: Vec<VisitRecord>,
    pub latent: Vec<PatientLatent>,
    pub structured_map: Vec<Affine>,
    pub static_map: Vec<Affine>,
}

fn draw_maps(rng: &mut ChaCha8Rng, n: usize) -> Vec<Affine> {
    (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Affine {
                intercept: rng.random_range(-1.0..1.0),
                slope: sign * rng.random_range(1.0..3.0),
            }
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const MAPS_STREAM: u64 = u64::MAX;

/// Generate a cohort; patient `i` draws from its own ChaCha stream so the
/// output is a pure function of the spec.
pub fn generate(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut maps_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    maps_rng.set_stream(MAPS_STREAM);
    let structured_map = draw_maps(&mut maps_rng, spec.structured.n_features);
    let static_map = draw_maps(&mut maps_rng, spec.static_features.n_features);

    let width = spec.n_patients.saturating_sub(1).to_string().len().max(4);
    let mut visits = Vec::with_capacity(spec.n_patients);
    let mut latent = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let pid = format!("p{i:0width$}");
        let (v, l) = patient(spec, &structured_map, &static_map, pid, &mut rng);
        visits.push(v);
        latent.push(l);
    }
    Ok(Cohort {
        visits,
        latent,
        structured_map,
        static_map,
    })
}

fn patient(
    spec: &CohortSpec,
    structured_map: &[Affine],
    static_map: &[Affine],
    pid: String,
    rng: &mut ChaCha8Rng,
) -> (VisitRecord, PatientLatent) {
    let lat = &spec.latent;
    let planned = rng.random_range(spec.hours_min..=spec.hours_max);
    let level = lat.level_mean + lat.level_sd * normal(rng);
    let stationary_sd = lat.innovation_sd / (1.0 - lat.phi * lat.phi).sqrt();

    // latent path over the visit plus follow-up; death may cut the visit short
    let horizon = planned + spec.labels.follow_up_hours;
    let mut x = level + stationary_sd * normal(rng);
    let mut health = Vec::with_capacity(horizon);
    let mut death_hour = None;
    for t in 0..horizon {
        if t > 0 {
            x = level + lat.phi * (x - level) + lat.innovation_sd * normal(rng);
        }
        let h = sigmoid(x);
        health.push(h);
        if rng.random::<f64>() < spec.death_probability(h) {
            death_hour = Some(t as f64 + rng.random::<f64>());
            break;
        }
    }
    let hours = planned.min(health.len());
    health.truncate(hours);

    let static_base: Vec<f64> = static_map
        .iter()
        .map(|m| m.at(sigmoid(level)) + spec.static_features.noise_sd * normal(rng))
        .collect();
    let sig = &spec.signal;
    let p = sig.segment_len();
    let mut v = VisitRecord {
        patient_id: pid.clone(),
        hours: (0..hours as i64).collect(),
        static_values: Vec::with_capacity(hours),
        structured: Vec::with_capacity(hours),
        signals: Vec::with_capacity(hours),
        signal_channels: sig.channels,
        signal_len: p,
        sample_rate: sig.sample_rate,
        signal_missing: Vec::with_capacity(hours),
        labels: VisitLabels {
            death_hour,
            map_mean: Some(health.iter().map(|&h| Some(spec.map_mean(h))).collect()),
        },
    };
    for &h in &health {
        let st = static_base
            .iter()
            .map(|&b| (rng.random::<f64>() >= spec.static_features.missing_rate).then_some(b))
            .collect();
        let sf = structured_map
            .iter()
            .map(|m| {
                let val = m.at(h) + spec.structured.noise_sd * normal(rng);
                (rng.random::<f64>() >= spec.structured.missing_rate).then_some(val)
            })
            .collect();
        let missing = rng.random::<f64>() < sig.missing_rate;
        let seg: Arc<[f32]> = if missing {
            vec![0.0f32; sig.channels * p].into()
        } else {
            sig.segment(h, rng).into()
        };
        v.static_values.push(st);
        v.structured.push(sf);
        v.signals.push(seg);
        v.signal_missing.push(missing);
    }
    let l = PatientLatent {
        patient_id: pid,
        level,
        health,
    };
    (v, l)
}

/// Named presets: `small` for quick suites, `medium` for acceptance runs.
/// Both use a low sample rate so pre-training fits a single CPU core. The
/// medium signals are noisier, so a supervised model trained from scratch
/// on a few labels does not already saturate.
pub fn default_specs() -> Vec<(&'static str, CohortSpec)> {
    let mut small = CohortSpec::default();
    small.signal.sample_rate = 20.0;
    let mut medium = small.clone();
    medium.n_patients = 2000;
    medium.signal.noise_sd = 2.0;
    medium.seed = 1;
    vec![("small", small), ("medium", medium)]
}

pub fn default_spec(name: &str) -> Result<CohortSpec> {
    default_specs()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Config(format!("unknown cohort preset '{name}'")))
}
