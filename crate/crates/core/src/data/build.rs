use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    DatasetStats, Task, Trajectory, VisitRecord, ELEVATED_MAP_THRESHOLD_MMHG, MAX_MISSING_SIGNALS,
    MORTALITY_HORIZON_HOURS,
};
use crate::error::{Error, Result};

/// Window geometry for trajectory construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Trajectory length `T`.
    pub steps: usize,
    /// Pre-training block length in hours.
    pub block_hours: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            block_hours: 12,
        }
    }
}

/// A window before imputation: raw optional values straight from the visit.
#[derive(Clone, Debug)]
pub struct TrajectoryDraft<'a> {
    pub visit: &'a VisitRecord,
    /// Index into the visit's hourly grid of the first timestep.
    pub offset: usize,
    pub steps: usize,
    pub block_id: Option<String>,
    pub label: Option<u8>,
}

/// Impute a draft into a trajectory, or `None` when it has more than one
/// missing signal and must be excluded.
///
/// Structured series are forward-filled inside the window; values missing
/// from the first step with no earlier observation take the training mean.
/// Static features are the mean of the window's observed values, else the
/// training mean. Missing signals are zero segments.
pub fn impute(draft: &TrajectoryDraft<'_>, stats: &DatasetStats) -> Option<Trajectory> {
    let v = draft.visit;
    let span = draft.offset..draft.offset + draft.steps;
    let signal_missing = v.signal_missing[span.clone()].to_vec();
    if signal_missing.iter().filter(|m| **m).count() > MAX_MISSING_SIGNALS {
        return None;
    }
    let m = v.n_structured();
    let mut structured = Vec::with_capacity(draft.steps * m);
    let mut last: Vec<Option<f64>> = vec![None; m];
    for row in &v.structured[span.clone()] {
        for (j, val) in row.iter().enumerate() {
            if let Some(x) = val.filter(|x| x.is_finite()) {
                last[j] = Some(x);
            }
            structured.push(last[j].unwrap_or(stats.structured_mean[j]));
        }
    }
    let l = v.n_static();
    let static_features = (0..l)
        .map(|j| {
            let seen: Vec<f64> = v.static_values[span.clone()]
                .iter()
                .filter_map(|row| row[j].filter(|x| x.is_finite()))
                .collect();
            if seen.is_empty() {
                stats.static_mean[j]
            } else {
                seen.iter().sum::<f64>() / seen.len() as f64
            }
        })
        .collect();
    let zero: Arc<[f32]> = vec![0.0f32; v.signal_channels * v.signal_len].into();
    let signals = v.signals[span.clone()]
        .iter()
        .zip(&signal_missing)
        .map(|(s, &miss)| if miss { zero.clone() } else { s.clone() })
        .collect();
    Some(Trajectory {
        patient_id: v.patient_id.clone(),
        block_id: draft.block_id.clone(),
        start_hour: v.hours[draft.offset],
        static_features,
        structured,
        n_structured: m,
        signals,
        signal_channels: v.signal_channels,
        signal_len: v.signal_len,
        sample_rate: v.sample_rate,
        signal_missing,
        label: draft.label,
    })
}

/// A disjoint `block_hours` span of one visit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PtBlock {
    pub visit: usize,
    pub offset: usize,
    pub block_id: String,
}

/// Enumerates pre-training blocks once and draws one window per block per
/// epoch with a fresh start offset.
#[derive(Clone, Debug)]
pub struct PtSampler {
    pub blocks: Vec<PtBlock>,
    pub window: WindowConfig,
}

impl PtSampler {
    /// Split each visit into contiguous non-overlapping blocks; a shorter
    /// tail is discarded.
    pub fn new(visits: &[VisitRecord], window: WindowConfig) -> Result<Self> {
        if window.steps == 0 || window.steps > window.block_hours {
            return Err(Error::Config(format!(
                "trajectory length {} must be in 1..={}",
                window.steps, window.block_hours
            )));
        }
        let mut blocks = Vec::new();
        for (vi, v) in visits.iter().enumerate() {
            v.validate()?;
            for k in 0..v.len_hours() / window.block_hours {
                blocks.push(PtBlock {
                    visit: vi,
                    offset: k * window.block_hours,
                    block_id: format!("{}:{k}", v.patient_id),
                });
            }
        }
        Ok(Self { blocks, window })
    }

    pub fn max_start(&self) -> usize {
        self.window.block_hours - self.window.steps
    }

    /// One trajectory per block (start offset uniform on `0..=max_start`),
    /// dropping windows that fail the missing-signal rule.
    pub fn sample_epoch<R: Rng>(&self, visits: &[VisitRecord], stats: &DatasetStats, rng: &mut R) -> Vec<Trajectory> {
        self.blocks
            .iter()
            .filter_map(|b| {
                let start = rng.random_range(0..=self.max_start());
                let draft = TrajectoryDraft {
                    visit: &visits[b.visit],
                    offset: b.offset + start,
                    steps: self.window.steps,
                    block_id: Some(b.block_id.clone()),
                    label: None,
                };
                impute(&draft, stats)
            })
            .collect()
    }
}

/// Pre-training trajectories for one epoch, seeded.
pub fn build_pt_dataset(
    visits: &[VisitRecord],
    stats: &DatasetStats,
    window: WindowConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let sampler = PtSampler::new(visits, window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample_epoch(visits, stats, &mut rng))
}

/// Labelled sliding-window dataset plus counts of dropped windows.
#[derive(Clone, Debug, Default)]
pub struct FtDataset {
    pub trajectories: Vec<Trajectory>,
    /// Windows rejected by the missing-signal rule.
    pub dropped_missing_signal: usize,
    /// Windows without the annotation the task needs.
    pub dropped_missing_annotation: usize,
}

impl FtDataset {
    pub fn prevalence(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let pos = self.trajectories.iter().filter(|t| t.label == Some(1)).count();
        pos as f64 / self.trajectories.len() as f64
    }
}

fn window_label(v: &VisitRecord, offset: usize, steps: usize, task: Task) -> Option<u8> {
    let last = offset + steps - 1;
    match task {
        Task::ElevatedMap => {
            let map = v.labels.map_mean.as_ref()?[last]?;
            Some(u8::from(map > ELEVATED_MAP_THRESHOLD_MMHG))
        }
        Task::Mortality24 => {
            let end = (v.hours[last] + 1) as f64;
            Some(match v.labels.death_hour {
                Some(d) => u8::from(d - end < MORTALITY_HORIZON_HOURS),
                None => 0,
            })
        }
    }
}

/// Every `steps`-hour window at one-hour increments, labelled for `task`.
pub fn build_ft_dataset(
    visits: &[VisitRecord],
    task: Task,
    stats: &DatasetStats,
    window: WindowConfig,
) -> Result<FtDataset> {
    let mut out = FtDataset::default();
    for v in visits {
        v.validate()?;
        let h = v.len_hours();
        if h < window.steps {
            continue;
        }
        for offset in 0..=h - window.steps {
            let Some(label) = window_label(v, offset, window.steps, task) else {
                out.dropped_missing_annotation += 1;
                continue;
            };
            let draft = TrajectoryDraft {
                visit: v,
                offset,
                steps: window.steps,
                block_id: None,
                label: Some(label),
            };
            match impute(&draft, stats) {
                Some(t) => out.trajectories.push(t),
                None => out.dropped_missing_signal += 1,
            }
        }
    }
    Ok(out)
}
