// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float32,
    Float64,
}

/// Decoder positional encoding. The encoder is always sinusoidal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "length", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeMode {
    Sinusoidal,
    /// Length-ratio encoding for a desired output length in tokens.
    Lrpe(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    #[serde(default = "default_base")]
    pub sinusoid_base: f64,
    pub seed: u64,
    pub precision: Precision,
    /// One embedding table for source, target and output projection;
    /// needs a shared vocabulary.
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_base() -> f64 {
    10000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 256,
            max_len: 32,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            dropout_rate: 0.1,
            label_smoothing: 0.1,
            sinusoid_base: 10000.0,
            seed: 1,
            precision: Precision::Float32,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the gradient check: d=16, one layer each side.
    pub fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 32,
            max_len: 16,
            src_vocab_size: vocab,
            tgt_vocab_size: vocab,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            sinusoid_base: 10000.0,
            seed: 3,
            precision: Precision::Float64,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be positive and even", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.max_len < 3 {
            return bad("d_ff must be positive and max_len >= 3".into());
        }
        if self.src_vocab_size < 7 || self.tgt_vocab_size < 7 {
            return bad("vocabularies must hold at least the 7 reserved tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.sinusoid_base <= 0.0 {
            return bad("sinusoid_base must be positive".into());
        }
        if self.tie_embeddings && self.src_vocab_size != self.tgt_vocab_size {
            return bad("tied embeddings need one shared vocabulary".into());
        }
        Ok(())
    }
}
