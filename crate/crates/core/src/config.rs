//! Pruning configuration, loadable from snake_case JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Channel ranking criterion for MLP hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// `E[x_j²]` from calibration activations.
    #[default]
    Activation,
    /// `‖W1 row_j‖ · ‖W2 col_j‖`.
    Magnitude,
}

impl std::str::FromStr for Ranking {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "activation" => Ok(Ranking::Activation),
            "magnitude" => Ok(Ranking::Magnitude),
            other => Err(ConfigError::Invalid(format!("unknown ranking {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub mlp_sparsity: f64,
    pub attn_sparsity: f64,
    /// `None` selects the energy-relative default per site.
    pub lambda_mlp: Option<f64>,
    pub lambda_attn: Option<f64>,
    pub ranking: Ranking,
    pub seed: u64,
    /// Images per calibration shard.
    pub calib_batch: usize,
    /// When false, channels are dropped without any compensation.
    pub compensate: bool,
    /// Refresh statistics from the partially pruned model before each block.
    pub recalibrate: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            mlp_sparsity: 0.5,
            attn_sparsity: 0.5,
            lambda_mlp: None,
            lambda_attn: None,
            ranking: Ranking::Activation,
            seed: 0,
            calib_batch: 16,
            compensate: true,
            recalibrate: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, s) in [("mlp_sparsity", self.mlp_sparsity), ("attn_sparsity", self.attn_sparsity)] {
            if !(0.0..1.0).contains(&s) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1), got {s}")));
            }
        }
        for (name, l) in [("lambda_mlp", self.lambda_mlp), ("lambda_attn", self.lambda_attn)] {
            if let Some(l) = l {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(ConfigError::Invalid(format!("{name} must be positive, got {l}")));
                }
            }
        }
        if self.calib_batch == 0 {
            return Err(ConfigError::Invalid("calib_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: PruneConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
