// SPDX-License-Identifier: MIT OR Apache-2.0

//! Emulated floating point with explicit precision and reduction order.

mod half;
mod packed;
mod profile;
mod reduce;

pub use half::{round_to_half, Half16};
pub use profile::{
    accumulation_error_profile, accumulation_error_profile_with, multilayer_propagation_sim, write_profile_csv,
    ErrorNormalization, ErrorProfile,
};
pub use reduce::{dot, relative_error, round_scalar, sum, Precision, ReductionOrder};

pub(crate) use packed::PackedMatrix;
pub(crate) use reduce::{dot_raw, sum_raw, weighted_rows_raw};
