use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trimodal_core::augment::{MixupConfig, ShiftConfig};
use trimodal_core::evaluate::ClassifierConfig;
use trimodal_core::trainer::TrainConfig;

use crate::error::{CliError, Result};

/// Everything a run needs, as read from the `--config` JSON file. Missing
/// blocks take the CPU-sized defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { checkpoint_every: 500, log_every: 10 }
    }
}

/// Downstream settings. Without a classifier block the protocol's own
/// head is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classifier: Option<ClassifierConfig>,
    pub mixup: MixupConfig,
    pub shift: ShiftConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.run.checkpoint_every == 0 || self.run.log_every == 0 {
            return Err(CliError::Config("checkpoint_every and log_every must be positive".into()));
        }
        self.eval.mixup.validate()?;
        if let Some(c) = &self.eval.classifier {
            c.validate()?;
        }
        Ok(())
    }
}
