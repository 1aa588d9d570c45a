use serde::{Deserialize, Serialize};

use kronykit_core::{Error, Result};

/// Shape of the toy character-level transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub context: usize,
    /// Character inventory size; set from the corpus.
    pub vocab: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            ffn_dim: 256,
            heads: 4,
            context: 128,
            vocab: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.context == 0 {
            return Err(Error::Argument(format!("model config has a zero dimension: {self:?}")));
        }
        if self.ffn_dim != 4 * self.d_model {
            return Err(Error::Argument(format!(
                "ffn_dim ({}) must be 4 * d_model ({})",
                self.ffn_dim, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Data(format!("vocabulary of {} characters is too small", self.vocab)));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings shared by dense training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_sequences: usize,
    pub grad_accum_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps even if the epochs are not done.
    pub max_steps: Option<usize>,
    /// Validation runs every `eval_interval` steps and after the last step.
    pub eval_interval: usize,
    /// Upper bound on validation windows per evaluation.
    pub eval_windows: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_sequences: 8,
            grad_accum_steps: 1,
            peak_lr: 3e-3,
            floor_lr: 3e-4,
            warmup_steps: 50,
            epochs: 1,
            seed: 0,
            max_steps: None,
            eval_interval: 50,
            eval_windows: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_sequences * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sequences == 0 || self.grad_accum_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Argument(
                "batch_sequences, grad_accum_steps and eval_interval must be positive".into(),
            ));
        }
        if !(self.peak_lr.is_finite() && self.floor_lr.is_finite()) || self.peak_lr < 0.0 || self.floor_lr < 0.0 {
            return Err(Error::Argument(format!(
                "learning rates must be finite and non-negative, got peak {} floor {}",
                self.peak_lr, self.floor_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
