// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired cache-ON / cache-OFF decoding.
//!
//! Cache-ON prefills the prompt one token at a time and then decodes
//! incrementally against a [`KvCache`](crate::model::KvCache) with
//! sequential reductions. Cache-OFF recomputes the full prefix at every step
//! with blocked(8) reductions. Both paths draw step `s`'s random number from
//! the stream keyed by `(seed, s)`, so a token difference can only come from
//! the distributions.

mod decode;
mod io;
mod sampling;

pub use decode::{
    decode, decode_with, paired_decode, path_states, CachePath, DecodeConfig, DecodeOptions, DecodeTrace, OffMode,
    PatchPlan, StepSnapshot, OFF_BLOCK,
};
pub use io::{read_probs, write_probs, Corpus, ProbsRef, TraceRecord};
pub use sampling::{
    candidate_set, sample_token, softmax_probs, Strategy, DEFAULT_TEMPERATURE, DEFAULT_TOP_K, DEFAULT_TOP_P,
};

#[cfg(test)]
mod tests;
