//! Decoder-only transformer LM: forward/backward, loss, training, checkpoints.

mod checkpoint;
mod eval;
mod loss;
mod optim;
mod params;
mod train;
mod transformer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{eval_window, mean_repr_sq_norm, perplexity, score_tokens, TokenScore};
pub use loss::{ce_loss, ce_loss_and_grad, log_softmax, softmax};
pub use optim::{Adam, OptimConfig};
pub use params::{Layout, LayerSlots, Params, Tensor};
pub use train::{
    train_run, EpochStats, Objective, ObjectiveKind, TrainConfig, TrainState, Trainer,
};
pub use transformer::{ForwardCache, ForwardOutput, Transformer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            context_len: 64,
            vocab_size: 0,
            tie_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
