//! Trajectory representation and pre-training / fine-tuning dataset
//! construction from hourly-resampled visits.

mod build;
mod io;
mod split;
mod stats;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use build::{
    build_ft_dataset, build_pt_dataset, impute, FtDataset, PtBlock, PtSampler, TrajectoryDraft, WindowConfig,
};
pub use io::{read_trajectories, read_visits, write_trajectories, write_visits, SignalStorage};
pub use split::{split_patients, DatasetSplit};
pub use stats::DatasetStats;

use crate::error::{Error, Result};

/// Mean pulmonary pressure strictly above this value marks an elevated window.
pub const ELEVATED_MAP_THRESHOLD_MMHG: f64 = 20.0;

/// Mortality label horizon, hours after the end of the trajectory.
pub const MORTALITY_HORIZON_HOURS: f64 = 24.0;

/// Binary downstream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ElevatedMap,
    Mortality24,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elevated_map" => Ok(Task::ElevatedMap),
            "mortality24" => Ok(Task::Mortality24),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::ElevatedMap => "elevated_map",
            Task::Mortality24 => "mortality24",
        })
    }
}

/// Event annotations attached to a visit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitLabels {
    /// Hour of death on the visit clock; `None` when no death is recorded.
    #[serde(default)]
    pub death_hour: Option<f64>,
    /// Mean pulmonary arterial pressure per hour mark (mmHg). `None` when the
    /// visit has no pressure waveform at all.
    #[serde(default)]
    pub map_mean: Option<Vec<Option<f64>>>,
}

/// One patient visit resampled to an hourly grid.
///
/// Every per-hour vector has one entry per element of `hours`. Signals are
/// `channels x samples` raw segments (30 s at `sample_rate`), all zeros where
/// `signal_missing` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitRecord {
    pub patient_id: String,
    pub hours: Vec<i64>,
    pub static_values: Vec<Vec<Option<f64>>>,
    pub structured: Vec<Vec<Option<f64>>>,
    pub signals: Vec<Arc<[f32]>>,
    pub signal_channels: usize,
    pub signal_len: usize,
    pub sample_rate: f64,
    pub signal_missing: Vec<bool>,
    pub labels: VisitLabels,
}

impl VisitRecord {
    pub fn len_hours(&self) -> usize {
        self.hours.len()
    }

    pub fn n_static(&self) -> usize {
        self.static_values.first().map_or(0, Vec::len)
    }

    pub fn n_structured(&self) -> usize {
        self.structured.first().map_or(0, Vec::len)
    }

    /// Check grid contiguity and per-hour lengths.
    pub fn validate(&self) -> Result<()> {
        let h = self.hours.len();
        let bad = |what: &str| Err(Error::Data(format!("visit {}: {what}", self.patient_id)));
        if self.hours.windows(2).any(|w| w[1] != w[0] + 1) {
            return bad("hourly grid must be contiguous and strictly increasing");
        }
        if self.static_values.len() != h
            || self.structured.len() != h
            || self.signals.len() != h
            || self.signal_missing.len() != h
        {
            return bad("per-hour fields disagree on length");
        }
        let (l, m) = (self.n_static(), self.n_structured());
        if self.static_values.iter().any(|r| r.len() != l) || self.structured.iter().any(|r| r.len() != m) {
            return bad("ragged feature rows");
        }
        let n = self.signal_channels * self.signal_len;
        if self.signals.iter().any(|s| s.len() != n) {
            return bad("signal segment shape mismatch");
        }
        if let Some(map) = &self.labels.map_mean {
            if map.len() != h {
                return bad("map_mean length differs from hours");
            }
        }
        Ok(())
    }
}

/// One admitted, imputed patient window.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub patient_id: String,
    /// Pre-training block this window was drawn from; `None` for fine-tuning windows.
    pub block_id: Option<String>,
    pub start_hour: i64,
    /// Static features, length `L`.
    pub static_features: Vec<f64>,
    /// Structured series, `T x M` row-major.
    pub structured: Vec<f64>,
    pub n_structured: usize,
    /// One `channels x samples` segment per timestep (shared with the visit).
    pub signals: Vec<Arc<[f32]>>,
    pub signal_channels: usize,
    pub signal_len: usize,
    pub sample_rate: f64,
    pub signal_missing: Vec<bool>,
    pub label: Option<u8>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.signal_missing.len()
    }

    pub fn n_static(&self) -> usize {
        self.static_features.len()
    }

    pub fn missing_count(&self) -> usize {
        self.signal_missing.iter().filter(|m| **m).count()
    }

    /// Hours covered, half-open.
    pub fn hour_span(&self) -> std::ops::Range<i64> {
        self.start_hour..self.start_hour + self.steps() as i64
    }
}

/// Maximum number of missing-signal timesteps an admitted trajectory may have.
pub const MAX_MISSING_SIGNALS: usize = 1;
