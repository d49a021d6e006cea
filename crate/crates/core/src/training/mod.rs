//! Optimization of the adapter and decoder with frozen encoders.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{assert_frozen, Checkpoint, CheckpointKind, CheckpointMeta};
pub use loss::{segmentation_loss, LossWeights};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{batch_tensors, evaluate, EpochLog, Evaluation, TrainOutcome, Trainer};

use crate::config::Precision;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the configured epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub freeze_backbones: bool,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub dtype: Precision,
    /// Puts the encoder parameters under the optimizer while
    /// `freeze_backbones` stays on. Only useful to exercise the frozen check.
    pub debug_unfreeze_backbones: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 40,
            seed: 0,
            loss_weights: LossWeights::default(),
            freeze_backbones: true,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            dtype: Precision::F32,
            debug_unfreeze_backbones: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Encoders join the optimizer only when not frozen or when explicitly
    /// forced for the negative control.
    pub fn train_backbones(&self) -> bool {
        !self.freeze_backbones || self.debug_unfreeze_backbones
    }
}
