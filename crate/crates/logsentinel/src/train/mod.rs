//! Training: the masked-key prediction loss, the compactness loss pulling
//! aggregate embeddings toward their center, hand-derived gradients, and
//! an Adam loop over encoded sequences.

pub mod adam;
pub mod backward;
pub mod fit;
pub mod loss;

pub use adam::{Adam, AdamConfig};
pub use backward::{backward_sequence, layer_norm_backward, softmax_backward_rows};
pub use fit::{fit, masked_top1_accuracy, EpochStats, TrainOutput};
pub use loss::{compute_center, mlkp_loss, total_loss, vhm_loss, Center};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which loss terms drive the parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainObjective {
    /// Masked-key prediction plus the weighted compactness term.
    Combined,
    MlkpOnly,
    VhmOnly,
}

impl Default for TrainObjective {
    fn default() -> Self {
        TrainObjective::Combined
    }
}

impl std::str::FromStr for TrainObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(TrainObjective::Combined),
            "mlkp_only" => Ok(TrainObjective::MlkpOnly),
            "vhm_only" => Ok(TrainObjective::VhmOnly),
            other => Err(Error::Usage(format!(
                "unknown objective '{other}', expected combined, mlkp_only, or vhm_only"
            ))),
        }
    }
}

/// When the hypersphere center is recomputed from the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterUpdate {
    /// At the start of every epoch; constant within the epoch.
    PerEpoch,
    /// At the start of each warmup epoch, then frozen.
    FixedAfterWarmup { warmup_epochs: usize },
}

impl Default for CenterUpdate {
    fn default() -> Self {
        CenterUpdate::PerEpoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the compactness term in the combined objective.
    pub alpha: f64,
    /// Fraction of key positions masked per sequence.
    pub mask_ratio: f64,
    pub objective: TrainObjective,
    pub center_update: CenterUpdate,
    pub seed: u64,
    /// Adam moment decay rates and divide-guard.
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Log a progress line every this many epochs; zero disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            alpha: 0.1,
            mask_ratio: 0.5,
            objective: TrainObjective::Combined,
            center_update: CenterUpdate::PerEpoch,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let base = TrainConfig::default();
        assert!(TrainConfig { mask_ratio: 0.0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { mask_ratio: 1.5, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { alpha: -0.1, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..base }.validate().is_err());
    }
}
