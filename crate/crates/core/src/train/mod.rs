//! Supervised training: loss, optimizer, weight files and the epoch loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_weights, load_weights_for, save_weights, Checkpoint};
pub use loss::{bce_loss, bce_loss_value};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{batch_loss, train, train_step, validate, LogEntry, TrainData, TrainOptions, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: u64,
    /// Recall thresholds for validation: rotation (degrees), translation.
    pub val_rot_thresh_deg: f64,
    pub val_trans_thresh: f64,
    /// Network passes per validation registration.
    pub val_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            epochs: 100,
            seed: 0,
            eval_every: 1,
            val_rot_thresh_deg: 5.0,
            val_trans_thresh: 0.05,
            val_iterations: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.val_iterations == 0 {
            return Err(Error::Config("batch_size, epochs, eval_every and val_iterations must be positive".into()));
        }
        if !(self.val_rot_thresh_deg > 0.0 && self.val_trans_thresh > 0.0) {
            return Err(Error::Config("validation thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Validation metrics of one set of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub epoch: u64,
    pub rr: f64,
    /// Means over valid registrations; `None` when none were valid.
    pub mie_r: Option<f64>,
    pub mie_t: Option<f64>,
}

impl Validation {
    /// Higher recall wins; ties go to the lower mean rotation error.
    pub fn better_than(&self, other: &Validation) -> bool {
        let key = |v: &Validation| v.mie_r.unwrap_or(f64::INFINITY);
        self.rr > other.rr || (self.rr == other.rr && key(self) < key(other))
    }
}
