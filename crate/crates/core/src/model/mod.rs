// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy decoder-only transformer.
//!
//! Pre-norm blocks (RMS normalisation, rotary positions, grouped-query
//! attention with optional sliding window, SiLU MLP). Every matrix product,
//! score, softmax sum and value aggregation is reduced in an explicit
//! [`ReductionOrder`](crate::precision::ReductionOrder) and rounded to the
//! working precision; softmax and normalisation statistics use binary32
//! (binary64 for the oracle).

mod config;
mod forward;
mod kv_cache;
mod weights;

pub use config::{ModelConfig, MLP_RATIO, ROPE_THETA};
pub use forward::{
    AttentionOutput, ForwardPatch, FullForward, HiddenState, Model, PositionRecord, StepOptions, WorkingModel,
};
pub use kv_cache::KvCache;
pub use weights::{init_weights, LayerWeights, TensorEntry, WeightManifest, Weights, BLOB_FILE, INIT_STD, MANIFEST_FILE};
