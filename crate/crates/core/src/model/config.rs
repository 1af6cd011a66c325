// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy decoder.
///
/// `n_heads / n_kv_heads` is the GQA sharing ratio R: 1 is multi-head
/// attention, `n_heads` is multi-query attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub sliding_window: Option<usize>,
    pub norm_eps: f64,
    pub max_positions: usize,
}

pub const ROPE_THETA: f64 = 10_000.0;
pub const MLP_RATIO: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(2)
    }
}

impl ModelConfig {
    /// The default toy model with `n_kv_heads` key/value heads
    /// (8 query heads of width 32, 4 layers, vocabulary 512).
    pub fn toy(n_kv_heads: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 8,
            n_kv_heads,
            head_dim: 32,
            d_model: 256,
            vocab_size: 512,
            sliding_window: None,
            norm_eps: 1e-5,
            max_positions: 256,
        }
    }

    /// The default toy model at GQA ratio `r`.
    pub fn toy_with_ratio(r: usize) -> Self {
        Self::toy(8 / r)
    }

    pub fn gqa_ratio(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.d_model == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return bad("all dimensions must be positive");
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad("n_heads must be a multiple of n_kv_heads");
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad("d_model must equal n_heads * head_dim");
        }
        if self.head_dim % 2 != 0 {
            return bad("head_dim must be even for rotary encoding");
        }
        if self.sliding_window == Some(0) {
            return bad("sliding_window must be positive");
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }
}
