//! The point-cloud transformer classifier.
//!
//! Token embedding is a two-layer point MLP (BatchNorm between the layers)
//! max-pooled over each neighborhood, plus an MLP over the token center.
//! A learnable CLS token is prepended and the sequence runs through pre-LN
//! transformer blocks. The head reads the final CLS row.

mod forward;
mod io;
mod layers;
mod train;
mod weights;

pub use forward::{
    attention_forward, embed_tokens, forward, forward_embedded, forward_traced, BlockOutput,
    ForwardTrace, KeepAll, PurgeHook,
};
pub use io::{load_weights, load_weights_checked, read_container, save_weights, write_container, Container};
pub use layers::{gelu, layer_norm};
pub use train::{
    batch_loss, batch_loss_and_gradients, finite_difference_check, train_source, GradCheck,
    TrainReport, TrainerConfig,
};
pub use weights::{BatchNorm, BlockWeights, EmbedWeights, HeadWeights, LayerNormParams, Linear, ModelWeights, TensorMut, TensorRef};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    #[serde(alias = "L_t")]
    pub num_tokens: usize,
    pub k: usize,
    pub n_classes: usize,
    pub ln_eps: f64,
    pub embed_hidden: usize,
    pub pos_hidden: usize,
    pub ffn_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_blocks: 3,
            n_heads: 4,
            num_tokens: 32,
            k: 16,
            n_classes: 4,
            ln_eps: 1e-5,
            embed_hidden: 32,
            pos_hidden: 32,
            ffn_hidden: 128,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("num_tokens", self.num_tokens),
            ("k", self.k),
            ("n_classes", self.n_classes),
            ("embed_hidden", self.embed_hidden),
            ("pos_hidden", self.pos_hidden),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid_arg(format!("{name} must be positive")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::invalid_arg(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.d < 2 {
            return Err(Error::invalid_arg("d must be at least 2 for layer norm"));
        }
        if !(self.ln_eps > 0.0) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid_arg("normalization eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid_arg("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Softmax temperature `1/sqrt(d)` applied to `Q·Kᵀ` in every head. This
    /// uses the full model width, not the per-head width.
    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }
}

/// How the embedding BatchNorm obtains its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Ord, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; the trainer folds them into the running stats.
    Training,
    /// Stored running statistics.
    Frozen,
    /// Statistics of the current batch only; running stats are never read.
    PerBatchReset,
}

impl std::str::FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(BnMode::Training),
            "frozen" => Ok(BnMode::Frozen),
            "reset" | "per_batch_reset" => Ok(BnMode::PerBatchReset),
            _ => Err(Error::invalid_arg(format!("unknown BatchNorm mode `{s}`"))),
        }
    }
}

/// Checks that a batch can be normalized under `mode`.
pub fn reset_batchnorm(batch_size: usize, mode: BnMode) -> Result<()> {
    if mode == BnMode::PerBatchReset && batch_size < 2 {
        return Err(Error::invalid_arg(
            "per-batch BatchNorm reset needs at least 2 samples per batch",
        ));
    }
    Ok(())
}

/// Per-sample classification scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.0)
    }

    /// Index of the largest score; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
