use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

/// Hidden width of the feed-forward block relative to `d_model`.
pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    /// Desk-scale teacher: 4 layers, width 128, 4 heads.
    pub fn teacher(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len,
            seed,
        }
    }

    /// Desk-scale student: 2 layers, width 64, 2 heads.
    pub fn student(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 2 {
            problems.push(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            problems.push(format!("max_seq_len must be >= 2, got {}", self.max_seq_len));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            problems.push("d_model, n_layers and n_heads must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "n_heads = {} does not divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        match problems.len() {
            0 => Ok(()),
            _ => Err(Error::InvalidArgument(problems.join("; "))),
        }
    }

    pub fn d_ff(&self) -> usize {
        MLP_RATIO * self.d_model
    }

    /// Number of scalars in a model of this shape.
    pub fn param_count(&self) -> usize {
        let (c, d, s, f) = (self.vocab_size, self.d_model, self.max_seq_len, self.d_ff());
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        c * d + s * d + self.n_layers * per_layer + 2 * d + d * c
    }
}
