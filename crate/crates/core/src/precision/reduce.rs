// SPDX-License-Identifier: MIT OR Apache-2.0

//! Precision tags, reduction orders and the rounding-faithful dot kernels.
//!
//! Every primitive step computes the exact result of its two operands and
//! rounds once to the working precision. Working values are carried as
//! `f64`; for binary16 and binary32 operands both products and sums of two
//! representable values are exact or innocuously double-rounded in binary64
//! (53 >= 2p + 2), so `round(a op b)` is the correctly rounded result.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::half::round_to_half;
use crate::error::{contract, Error, Result};

/// Working precision of a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Half16,
    Single32,
    /// Reference precision; never the precision of a measured path.
    Double64Oracle,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Half16, Precision::Single32, Precision::Double64Oracle];

    #[inline(always)]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Half16 => round_to_half(x),
            Precision::Single32 => x as f32 as f64,
            Precision::Double64Oracle => x,
        }
    }

    /// Precision for softmax and normalisation statistics: binary32, or the
    /// working precision if it is wider.
    pub fn statistics(self) -> Precision {
        match self {
            Precision::Half16 | Precision::Single32 => Precision::Single32,
            Precision::Double64Oracle => Precision::Double64Oracle,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Half16 => "half16",
            Precision::Single32 => "single32",
            Precision::Double64Oracle => "double64_oracle",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half16" | "fp16" | "half" => Ok(Precision::Half16),
            "single32" | "fp32" | "single" => Ok(Precision::Single32),
            "double64_oracle" | "double64" | "fp64" => Ok(Precision::Double64Oracle),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Grouping used to accumulate a sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionOrder {
    /// `((x0 + x1) + x2) + ...`
    Sequential,
    /// Consecutive blocks of `block_size` summed sequentially, block
    /// results then accumulated sequentially.
    Blocked { block_size: NonZeroUsize },
    /// Balanced tree: split at `n / 2` (floor), the odd element goes right.
    PairwiseTree,
}

impl ReductionOrder {
    pub fn blocked(block_size: usize) -> Self {
        ReductionOrder::Blocked {
            block_size: NonZeroUsize::new(block_size).expect("block size must be positive"),
        }
    }
}

impl fmt::Display for ReductionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReductionOrder::Sequential => f.write_str("sequential"),
            ReductionOrder::Blocked { block_size } => write!(f, "blocked({block_size})"),
            ReductionOrder::PairwiseTree => f.write_str("pairwise_tree"),
        }
    }
}

pub(crate) trait Rounding {
    fn r(x: f64) -> f64;
}

pub(crate) struct H;
pub(crate) struct S;
pub(crate) struct D;

impl Rounding for H {
    #[inline(always)]
    fn r(x: f64) -> f64 {
        round_to_half(x)
    }
}
impl Rounding for S {
    #[inline(always)]
    fn r(x: f64) -> f64 {
        x as f32 as f64
    }
}
impl Rounding for D {
    #[inline(always)]
    fn r(x: f64) -> f64 {
        x
    }
}

/// Reduces `n` terms produced by `term` (already rounded) in the given order.
#[inline(always)]
fn reduce_with<R: Rounding>(n: usize, term: impl Fn(usize) -> f64, ord: ReductionOrder) -> f64 {
    if n == 0 {
        return 0.0;
    }
    match ord {
        ReductionOrder::Sequential => {
            let mut acc = term(0);
            for i in 1..n {
                acc = R::r(acc + term(i));
            }
            acc
        }
        ReductionOrder::Blocked { block_size } => {
            let b = block_size.get();
            let mut total = 0.0;
            let mut start = 0;
            while start < n {
                let end = (start + b).min(n);
                let mut part = term(start);
                for i in start + 1..end {
                    part = R::r(part + term(i));
                }
                total = if start == 0 { part } else { R::r(total + part) };
                start = end;
            }
            total
        }
        ReductionOrder::PairwiseTree => tree::<R>(0, n, &term),
    }
}

fn tree<R: Rounding>(lo: usize, hi: usize, term: &impl Fn(usize) -> f64) -> f64 {
    let n = hi - lo;
    if n == 1 {
        return term(lo);
    }
    let mid = lo + n / 2;
    R::r(tree::<R>(lo, mid, term) + tree::<R>(mid, hi, term))
}

/// Dot product of operands already representable in `p`.
#[inline]
pub(crate) fn dot_raw(a: &[f64], b: &[f64], p: Precision, ord: ReductionOrder) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    match p {
        Precision::Half16 => reduce_with::<H>(n, |i| H::r(a[i] * b[i]), ord),
        Precision::Single32 => reduce_with::<S>(n, |i| S::r(a[i] * b[i]), ord),
        Precision::Double64Oracle => reduce_with::<D>(n, |i| a[i] * b[i], ord),
    }
}

/// Sum of values already representable in `p`.
pub(crate) fn sum_raw(xs: &[f64], p: Precision, ord: ReductionOrder) -> f64 {
    match p {
        Precision::Half16 => reduce_with::<H>(xs.len(), |i| xs[i], ord),
        Precision::Single32 => reduce_with::<S>(xs.len(), |i| xs[i], ord),
        Precision::Double64Oracle => reduce_with::<D>(xs.len(), |i| xs[i], ord),
    }
}

/// `out[r] = dot(rows[r], x)` for a row-major `rows` of width `x.len()`.
///
/// Bit-identical to calling [`dot_raw`] per row; four rows are interleaved
/// so the rounding chains overlap.
pub(crate) fn matvec_raw(rows: &[f64], x: &[f64], out: &mut [f64], p: Precision, ord: ReductionOrder) {
    match p {
        Precision::Half16 => matvec_impl::<H>(rows, x, out, ord, true),
        Precision::Single32 => matvec_impl::<S>(rows, x, out, ord, true),
        Precision::Double64Oracle => matvec_impl::<D>(rows, x, out, ord, false),
    }
}

#[inline(always)]
fn matvec_impl<R: Rounding>(rows: &[f64], x: &[f64], out: &mut [f64], ord: ReductionOrder, round_products: bool) {
    let n = x.len();
    debug_assert_eq!(rows.len(), n * out.len());
    let prod = |w: f64, v: f64| if round_products { R::r(w * v) } else { w * v };
    let block = match ord {
        ReductionOrder::Sequential => n.max(1),
        ReductionOrder::Blocked { block_size } => block_size.get(),
        ReductionOrder::PairwiseTree => {
            for (o, row) in out.iter_mut().zip(rows.chunks_exact(n)) {
                *o = reduce_with::<R>(n, |i| prod(row[i], x[i]), ord);
            }
            return;
        }
    };
    if n == 0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut chunks = out.chunks_exact_mut(4);
    let mut r0 = 0;
    for o in &mut chunks {
        let w0 = &rows[r0 * n..(r0 + 1) * n];
        let w1 = &rows[(r0 + 1) * n..(r0 + 2) * n];
        let w2 = &rows[(r0 + 2) * n..(r0 + 3) * n];
        let w3 = &rows[(r0 + 3) * n..(r0 + 4) * n];
        let mut t = [0.0f64; 4];
        let mut start = 0;
        while start < n {
            let end = (start + block).min(n);
            let mut p = [
                prod(w0[start], x[start]),
                prod(w1[start], x[start]),
                prod(w2[start], x[start]),
                prod(w3[start], x[start]),
            ];
            for i in start + 1..end {
                let xi = x[i];
                p[0] = R::r(p[0] + prod(w0[i], xi));
                p[1] = R::r(p[1] + prod(w1[i], xi));
                p[2] = R::r(p[2] + prod(w2[i], xi));
                p[3] = R::r(p[3] + prod(w3[i], xi));
            }
            if start == 0 {
                t = p;
            } else {
                for k in 0..4 {
                    t[k] = R::r(t[k] + p[k]);
                }
            }
            start = end;
        }
        o.copy_from_slice(&t);
        r0 += 4;
    }
    for (k, o) in chunks.into_remainder().iter_mut().enumerate() {
        let row = &rows[(r0 + k) * n..(r0 + k + 1) * n];
        *o = reduce_with::<R>(n, |i| prod(row[i], x[i]), ord);
    }
}

/// `out[c] = sum_j weights[j] * row_j[c]` with row `j` at
/// `flat[(first_row + j) * stride + col_offset..][..out.len()]`.
///
/// Per output column this is bit-identical to [`dot_raw`] of `weights`
/// against the gathered column; the columns are just advanced together.
pub(crate) fn weighted_rows_raw(
    weights: &[f64],
    flat: &[f64],
    first_row: usize,
    stride: usize,
    col_offset: usize,
    out: &mut [f64],
    p: Precision,
    ord: ReductionOrder,
) {
    let rows = RowView { flat, first_row, stride, col_offset, width: out.len() };
    match p {
        Precision::Half16 => weighted_impl::<H>(weights, &rows, out, ord, true),
        Precision::Single32 => weighted_impl::<S>(weights, &rows, out, ord, true),
        Precision::Double64Oracle => weighted_impl::<D>(weights, &rows, out, ord, false),
    }
}

struct RowView<'a> {
    flat: &'a [f64],
    first_row: usize,
    stride: usize,
    col_offset: usize,
    width: usize,
}

impl RowView<'_> {
    #[inline(always)]
    fn row(&self, j: usize) -> &[f64] {
        let start = (self.first_row + j) * self.stride + self.col_offset;
        &self.flat[start..start + self.width]
    }
}

#[inline(always)]
fn weighted_impl<R: Rounding>(w: &[f64], rows: &RowView<'_>, out: &mut [f64], ord: ReductionOrder, round_products: bool) {
    let n = w.len();
    if n == 0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let prod = |a: f64, b: f64| if round_products { R::r(a * b) } else { a * b };
    let seq_range = |lo: usize, hi: usize, acc: &mut [f64]| {
        for (a, &v) in acc.iter_mut().zip(rows.row(lo)) {
            *a = prod(w[lo], v);
        }
        for j in lo + 1..hi {
            let wj = w[j];
            for (a, &v) in acc.iter_mut().zip(rows.row(j)) {
                *a = R::r(*a + prod(wj, v));
            }
        }
    };
    match ord {
        ReductionOrder::Sequential => seq_range(0, n, out),
        ReductionOrder::Blocked { block_size } => {
            let b = block_size.get();
            let mut part = vec![0.0; out.len()];
            let mut start = 0;
            while start < n {
                let end = (start + b).min(n);
                if start == 0 {
                    seq_range(start, end, out);
                } else {
                    seq_range(start, end, &mut part);
                    for (o, q) in out.iter_mut().zip(&part) {
                        *o = R::r(*o + q);
                    }
                }
                start = end;
            }
        }
        ReductionOrder::PairwiseTree => {
            fn tree<R: Rounding>(lo: usize, hi: usize, leaf: &impl Fn(usize, &mut [f64]), out: &mut [f64]) {
                if hi - lo == 1 {
                    leaf(lo, out);
                    return;
                }
                let mid = lo + (hi - lo) / 2;
                let mut right = vec![0.0; out.len()];
                tree::<R>(lo, mid, leaf, out);
                tree::<R>(mid, hi, leaf, &mut right);
                for (o, r) in out.iter_mut().zip(&right) {
                    *o = R::r(*o + r);
                }
            }
            let leaf = |j: usize, acc: &mut [f64]| {
                for (a, &v) in acc.iter_mut().zip(rows.row(j)) {
                    *a = prod(w[j], v);
                }
            };
            tree::<R>(0, n, &leaf, out);
        }
    }
}

/// Rounds a binary64 value to `p` (ties to even; identity for binary64).
pub fn round_scalar(x: f64, p: Precision) -> f64 {
    p.round(x)
}

/// Dot product with every product and partial sum rounded to `p`.
///
/// Inputs are first rounded to `p`. No fused multiply-add is modelled.
pub fn dot(a: &[f64], b: &[f64], p: Precision, ord: ReductionOrder) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("dot: length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(contract("dot: empty operands"));
    }
    let ar: Vec<f64> = a.iter().map(|&x| p.round(x)).collect();
    let br: Vec<f64> = b.iter().map(|&x| p.round(x)).collect();
    Ok(dot_raw(&ar, &br, p, ord))
}

/// Sum of `xs` rounded to `p` at every step.
pub fn sum(xs: &[f64], p: Precision, ord: ReductionOrder) -> f64 {
    let r: Vec<f64> = xs.iter().map(|&x| p.round(x)).collect();
    sum_raw(&r, p, ord)
}

/// `|approx - oracle| / |oracle|`.
pub fn relative_error(approx: f64, oracle: f64) -> Result<f64> {
    if oracle == 0.0 {
        return Err(Error::Undefined("relative error against a zero oracle".into()));
    }
    Ok((approx - oracle).abs() / oracle.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const HALF: Precision = Precision::Half16;

    fn normals(seed: u64, tag: u64, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, Domain::Misc, &[tag]);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn round_scalar_examples() {
        assert_eq!(round_scalar(2049.0, HALF), 2048.0);
        assert_eq!(round_scalar(1.0, HALF), 1.0);
        assert_eq!(round_scalar(65520.0, HALF), f64::INFINITY);
        assert_eq!(round_scalar(0.1, Precision::Double64Oracle), 0.1);
        assert_eq!(round_scalar(0.1, Precision::Single32), 0.1f32 as f64);
    }

    #[test]
    fn non_associativity_witness() {
        let a = [2048.0, 1.0, 1.0];
        let b = [1.0, 1.0, 1.0];
        assert_eq!(dot(&a, &b, HALF, ReductionOrder::Sequential).unwrap(), 2048.0);
        assert_eq!(dot(&a, &b, HALF, ReductionOrder::PairwiseTree).unwrap(), 2050.0);
        let o = Precision::Double64Oracle;
        assert_eq!(dot(&a, &b, o, ReductionOrder::Sequential).unwrap(), 2050.0);
        assert_eq!(dot(&a, &b, o, ReductionOrder::PairwiseTree).unwrap(), 2050.0);
    }

    #[test]
    fn padded_tree_example_follows_floor_split() {
        // Split at 2: (2048 + 1) + (1 + 0); 2049 ties to 2048 and so does the total.
        let a = [2048.0, 1.0, 1.0, 0.0];
        let b = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(dot(&a, &b, HALF, ReductionOrder::PairwiseTree).unwrap(), 2048.0);
    }

    #[test]
    fn dot_errors() {
        assert!(matches!(dot(&[1.0], &[1.0, 2.0], HALF, ReductionOrder::Sequential), Err(Error::Contract(_))));
        assert!(dot(&[], &[], HALF, ReductionOrder::Sequential).is_err());
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0).unwrap(), 0.0);
        assert!((relative_error(1.1, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 2.0).unwrap(), 1.0);
        assert!(matches!(relative_error(1.0, 0.0), Err(Error::Undefined(_))));
    }

    // Pinned on first build: seed-7 length-128 draw.
    const SEED7_REL_ERR: f64 = 3.5380620408293918e-3;

    #[test]
    fn seeded_length_128_relative_error() {
        let a = normals(7, 0, 128);
        let b = normals(7, 1, 128);
        let half = dot(&a, &b, HALF, ReductionOrder::Sequential).unwrap();
        // oracle: same rounded operands, plain binary64 loop
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| round_to_half(*x) * round_to_half(*y)).sum();
        let rel = relative_error(half, oracle).unwrap();
        assert!((1e-5..=1e-2).contains(&rel), "rel = {rel:e}");
        assert_eq!(rel, SEED7_REL_ERR);
    }

    #[test]
    fn blocked_one_is_sequential() {
        for p in Precision::ALL {
            for n in [1, 2, 7, 64, 129] {
                let a = normals(3, n as u64, n);
                let b = normals(4, n as u64, n);
                let s = dot(&a, &b, p, ReductionOrder::Sequential).unwrap();
                let b1 = dot(&a, &b, p, ReductionOrder::blocked(1)).unwrap();
                assert_eq!(s.to_bits(), b1.to_bits());
            }
        }
    }

    #[test]
    fn matvec_matches_per_row_dot() {
        let n = 37;
        let rows = 11;
        let x: Vec<f64> = normals(1, 0, n).into_iter().map(round_to_half).collect();
        let w: Vec<f64> = normals(1, 1, n * rows).into_iter().map(round_to_half).collect();
        for p in Precision::ALL {
            for ord in [ReductionOrder::Sequential, ReductionOrder::blocked(8), ReductionOrder::blocked(5), ReductionOrder::PairwiseTree] {
                let mut out = vec![0.0; rows];
                matvec_raw(&w, &x, &mut out, p, ord);
                for r in 0..rows {
                    let want = dot_raw(&w[r * n..(r + 1) * n], &x, p, ord);
                    assert_eq!(out[r].to_bits(), want.to_bits(), "{p} {ord} row {r}");
                }
            }
        }
    }

    #[test]
    fn weighted_rows_match_column_dots() {
        let (rows, stride, width, off) = (19, 12, 5, 3);
        let flat: Vec<f64> = normals(2, 0, (rows + 2) * stride).into_iter().map(round_to_half).collect();
        let w: Vec<f64> = normals(2, 1, rows).into_iter().map(round_to_half).collect();
        for p in Precision::ALL {
            for ord in [ReductionOrder::Sequential, ReductionOrder::blocked(8), ReductionOrder::PairwiseTree] {
                let mut out = vec![0.0; width];
                weighted_rows_raw(&w, &flat, 2, stride, off, &mut out, p, ord);
                for c in 0..width {
                    let col: Vec<f64> = (0..rows).map(|j| flat[(2 + j) * stride + off + c]).collect();
                    assert_eq!(out[c].to_bits(), dot_raw(&w, &col, p, ord).to_bits());
                }
            }
        }
    }

    #[test]
    fn single_beats_half_on_order_sensitivity() {
        // Lengths 9..=4096 so that blocked(8) and sequential actually differ.
        let trials = 1000u64;
        let mut wins = 0;
        let mut worst_single = 0.0f64;
        for t in 0..trials {
            let n = 9 + ((t * 2654435761) % 4088) as usize;
            let a = normals(11, 2 * t, n);
            let b = normals(11, 2 * t + 1, n);
            // Scale by the accumulated magnitude; |oracle| alone is heavy-tailed
            // under cancellation.
            let scale: f64 = a.iter().zip(&b).map(|(x, y)| (x * y).abs()).sum();
            let gap = |p| {
                (dot(&a, &b, p, ReductionOrder::Sequential).unwrap()
                    - dot(&a, &b, p, ReductionOrder::blocked(8)).unwrap())
                .abs()
            };
            let s = gap(Precision::Single32);
            let h = gap(HALF);
            worst_single = worst_single.max(s / scale);
            if h >= 10.0 * s {
                wins += 1;
            }
        }
        assert!(worst_single < 1e-6, "worst single32 gap {worst_single:e}");
        assert!(wins >= 950, "wins = {wins}");
    }

    proptest! {
        #[test]
        fn oracle_is_order_independent_within_n_ulps(xs in proptest::collection::vec(-1e3f64..1e3, 1..4096)) {
            let o = Precision::Double64Oracle;
            let s = sum(&xs, o, ReductionOrder::Sequential);
            let t = sum(&xs, o, ReductionOrder::PairwiseTree);
            let b = sum(&xs, o, ReductionOrder::blocked(8));
            let mag: f64 = xs.iter().map(|x| x.abs()).sum();
            let tol = xs.len() as f64 * f64::EPSILON * mag.max(f64::MIN_POSITIVE);
            prop_assert!((s - t).abs() <= tol);
            prop_assert!((s - b).abs() <= tol);
        }

        #[test]
        fn dot_is_deterministic(seed in 0u64..1000, n in 1usize..300) {
            let a = normals(seed, 0, n);
            let b = normals(seed, 1, n);
            for ord in [ReductionOrder::Sequential, ReductionOrder::blocked(8), ReductionOrder::PairwiseTree] {
                let x = dot(&a, &b, HALF, ord).unwrap();
                let y = dot(&a, &b, HALF, ord).unwrap();
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
