// SPDX-License-Identifier: MIT OR Apache-2.0

//! Accumulation-error micro-experiments.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::reduce::{dot_raw, Precision, ReductionOrder};
use crate::error::{contract, Result};
use crate::rng::{stream, Domain};

/// Oracle dot products smaller than this are redrawn.
pub const ORACLE_FLOOR: f64 = 1e-6;

/// Mean and spread of the relative accumulation error at one length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub length: usize,
    pub trials: usize,
    pub mean_rel_error: f64,
    pub std_rel_error: f64,
}

/// Denominator of the relative error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNormalization {
    /// `|dot_p - dot_oracle| / sum_i |a_i b_i|`: the error relative to the
    /// magnitude actually accumulated. Bounded away from zero, so the mean
    /// over trials is stable.
    #[default]
    AbsoluteDot,
    /// `|dot_p - dot_oracle| / |dot_oracle|`. Heavy-tailed: for Gaussian
    /// inputs `E[1/|dot|]` only exists because of the redraw floor.
    Oracle,
}

/// Relative error of binary16 dot products of standard-normal vectors,
/// per length, using [`ErrorNormalization::AbsoluteDot`].
pub fn accumulation_error_profile(
    lengths: &[usize],
    trials: usize,
    seed: u64,
    ord: ReductionOrder,
) -> Result<Vec<ErrorProfile>> {
    accumulation_error_profile_with(lengths, trials, seed, ord, Precision::Half16, ErrorNormalization::AbsoluteDot)
}

/// As [`accumulation_error_profile`] with an explicit working precision and
/// normalisation.
///
/// Draws depend on `(seed, length, trial, attempt)` only, so profiles for
/// different orders or precisions see the same vectors.
pub fn accumulation_error_profile_with(
    lengths: &[usize],
    trials: usize,
    seed: u64,
    ord: ReductionOrder,
    precision: Precision,
    normalization: ErrorNormalization,
) -> Result<Vec<ErrorProfile>> {
    if lengths.is_empty() {
        return Err(contract("accumulation_error_profile: no lengths"));
    }
    if trials == 0 {
        return Err(contract("accumulation_error_profile: trials must be >= 1"));
    }
    if lengths.contains(&0) {
        return Err(contract("accumulation_error_profile: lengths must be positive"));
    }
    let mut out = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let mut errs = Vec::with_capacity(trials);
        for trial in 0..trials {
            errs.push(one_trial(n, trial, seed, ord, precision, normalization));
        }
        let mean = errs.iter().sum::<f64>() / trials as f64;
        let std = if trials > 1 {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(ErrorProfile { length: n, trials, mean_rel_error: mean, std_rel_error: std });
    }
    Ok(out)
}

fn one_trial(
    n: usize,
    trial: usize,
    seed: u64,
    ord: ReductionOrder,
    precision: Precision,
    normalization: ErrorNormalization,
) -> f64 {
    for attempt in 0u64.. {
        let mut rng = stream(seed, Domain::AccumulationProfile, &[n as u64, trial as u64, attempt]);
        let a: Vec<f64> = (0..n).map(|_| precision.round(rng.sample(StandardNormal))).collect();
        let b: Vec<f64> = (0..n).map(|_| precision.round(rng.sample(StandardNormal))).collect();
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        if oracle.abs() < ORACLE_FLOOR {
            continue;
        }
        let approx = dot_raw(&a, &b, precision, ord);
        let denom = match normalization {
            ErrorNormalization::AbsoluteDot => a.iter().zip(&b).map(|(x, y)| (x * y).abs()).sum::<f64>(),
            ErrorNormalization::Oracle => oracle.abs(),
        };
        return (approx - oracle).abs() / denom;
    }
    unreachable!()
}

/// Writes profiles as CSV with header `length,trials,mean_rel_error,std_rel_error`.
pub fn write_profile_csv<W: Write>(w: W, profiles: &[ErrorProfile]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in profiles {
        wtr.serialize(p)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Affine layer-to-layer error recurrence `e[l+1] = gain * e[l] + injection`.
///
/// Returns `n_layers + 1` values starting at `e0`.
pub fn multilayer_propagation_sim(n_layers: usize, per_layer_injection: f64, per_layer_gain: f64, e0: f64) -> Result<Vec<f64>> {
    if !(per_layer_injection.is_finite() && per_layer_gain.is_finite() && e0.is_finite()) {
        return Err(contract("multilayer_propagation_sim: parameters must be finite"));
    }
    if n_layers == 0 || per_layer_injection < 0.0 || per_layer_gain <= 0.0 || e0 < 0.0 {
        return Err(contract("multilayer_propagation_sim: parameter out of range"));
    }
    let mut traj = Vec::with_capacity(n_layers + 1);
    let mut e = e0;
    traj.push(e);
    for _ in 0..n_layers {
        e = per_layer_gain * e + per_layer_injection;
        traj.push(e);
    }
    Ok(traj)
}
