// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub d_vocab: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Four layers of four heads; large enough for the synthetic tasks to train.
    pub fn toy(d_vocab: usize) -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 64, d_head: 16, d_mlp: 256, d_vocab, max_seq_len: 24 }
    }

    /// Same depth and head count as [`ModelConfig::toy`], narrower everywhere else.
    pub fn small(d_vocab: usize) -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 32, d_head: 8, d_mlp: 64, d_vocab, max_seq_len: 24 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("d_vocab", self.d_vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        Ok(())
    }
}
