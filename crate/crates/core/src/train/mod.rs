//! Optimisation loops, evaluation and representation analysis.

pub mod analysis;
pub mod cka;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::data::WindowConfig;
use crate::error::{Error, Result};

pub use finetune::{finetune, predict, FinetuneOutcome, FtEpoch, Strategy};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{pretrain, pretrain_objective, pretrain_objective_traced, CurvePoint, PretrainOptions, PretrainOutcome, PtLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Trajectories per optimisation step, for both PT and FT.
    pub batch_size: usize,
    pub pt_epochs: usize,
    pub ft_max_epochs: usize,
    /// Epochs without a validation AUROC improvement before FT stops;
    /// `None` runs to the cap.
    #[serde(default)]
    pub ft_patience: Option<usize>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub window: WindowConfig,
    /// Fraction of training patients whose labels FT may use.
    #[serde(default = "one")]
    pub label_fraction: f64,
    /// Cap on validation and test windows, drawn uniformly at random.
    #[serde(default)]
    pub eval_max_windows: Option<usize>,
    /// Cap on PT optimisation steps per epoch.
    #[serde(default)]
    pub max_pt_steps_per_epoch: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 128,
            pt_epochs: 15,
            ft_max_epochs: 10,
            ft_patience: None,
            seeds: vec![0, 1, 2],
            strategies: vec![Strategy::Linear, Strategy::FullFt],
            bootstrap_resamples: 100,
            window: WindowConfig::default(),
            label_fraction: 1.0,
            eval_max_windows: None,
            max_pt_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale batch size.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        if self.pt_epochs == 0 || self.ft_max_epochs == 0 {
            return Err(Error::Config("pt_epochs and ft_max_epochs must be at least 1".into()));
        }
        if self.ft_patience == Some(0) {
            return Err(Error::Config("ft_patience must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one evaluation strategy is required".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be at least 1".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config("label_fraction must lie in (0, 1]".into()));
        }
        if self.eval_max_windows == Some(0) || self.max_pt_steps_per_epoch == Some(0) {
            return Err(Error::Config("caps must be positive when set".into()));
        }
        if self.window.steps == 0 || self.window.steps > self.window.block_hours {
            return Err(Error::Config("window steps must be in 1..=block_hours".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
