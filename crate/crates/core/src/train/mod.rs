//! Optimization and evaluation: AdamW with a cosine schedule, metrics,
//! checkpoints, early-stopped training and finite-difference checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use metrics::{compute_metrics, pairwise_auc, MetricsReport};
pub use optim::{adamw_step, cosine_lr, AdamW, AdamWParams};
pub use trainer::{evaluate, predict_proba, train, EpochRecord, LabeledExample, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 2e-4,
            weight_decay: 0.01,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lora_rank: 8,
            lora_alpha: 16.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` and `lr = 0` are legal degenerate runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
            return bad("train.lora_rank and train.lora_alpha must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}
