use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Precision;

/// Token id reserved for padding.
pub const PAD: usize = 0;
/// Token id reserved for the generic placeholder used in corrupt prompts.
pub const PLACEHOLDER: usize = 1;

/// How many residual-stream reads an attention head exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SlotMode {
    /// Separate query, key and value reads.
    #[default]
    Qkv,
    /// One shared read feeding q, k and v.
    Single,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub slot_mode: SlotMode,
    /// Test hook: start the unembedding at zero.
    #[serde(default)]
    pub zero_unembed: bool,
}

impl ModelConfig {
    /// Layers × heads × width with the usual 4× MLP.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len: 8,
            seed: 0,
            precision: Precision::F32,
            slot_mode: SlotMode::Qkv,
            zero_unembed: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} < 4 (PAD and PLACEHOLDER are reserved)",
                self.vocab_size
            )));
        }
        if self.max_seq_len == 0 || self.d_mlp == 0 {
            return Err(Error::Config("max_seq_len and d_mlp must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, t, d, m, l) = (
            self.vocab_size,
            self.max_seq_len,
            self.d_model,
            self.d_mlp,
            self.n_layers,
        );
        let per_layer = 4 * d + 4 * d * d + 2 * d * m + m + d;
        v * d + t * d + l * per_layer + 2 * d + d * v
    }
}
