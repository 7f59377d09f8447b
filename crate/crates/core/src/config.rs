//! Run configuration as archived in every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::train::pipeline::RunPlan;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Visits JSON Lines file.
    pub visits: PathBuf,
}

/// Every hyperparameter of a run. The input mode lives in `model.mode`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub tasks: Vec<Task>,
    /// `false` gives the randomly initialised baseline.
    #[serde(default = "yes")]
    pub pretrain: bool,
    pub output_dir: PathBuf,
    /// Model initialisation and training seed.
    pub seed: u64,
    /// Patient split seed.
    #[serde(default)]
    pub split_seed: u64,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// Desk-scale defaults reading `visits` and writing to `output_dir`.
    pub fn desk(visits: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            data: DataPaths { visits: visits.into() },
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::desk(),
            tasks: vec![Task::ElevatedMap],
            pretrain: true,
            output_dir: output_dir.into(),
            seed: 0,
            split_seed: 0,
        }
    }

    pub fn plan(&self) -> RunPlan {
        RunPlan {
            model: self.model.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            train: self.train.clone(),
            tasks: self.tasks.clone(),
            pretrain: self.pretrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()
    }

    /// Parse and validate; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
