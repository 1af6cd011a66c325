// SPDX-License-Identifier: MIT OR Apache-2.0

//! Divergence metrics between the two paths.
//!
//! KL and JS are in bits. Probability entries are floored at
//! [`PROB_FLOOR`] and renormalised before any logarithm is taken, so binary32
//! underflow never produces an infinity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const PROB_FLOOR: f64 = 1e-10;

fn check_dist(p: &[f32], q: &[f32]) -> Result<()> {
    if p.len() != q.len() {
        return Err(contract(format!("distribution lengths differ: {} vs {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(contract("empty distribution"));
    }
    Ok(())
}

fn floored(p: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = p.iter().map(|&x| (x as f64).max(PROB_FLOOR)).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

fn kl_f64(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(q).map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).log2() }).sum();
    s.max(0.0)
}

/// `KL(p ‖ q)` in bits.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    check_dist(p, q)?;
    Ok(kl_f64(&floored(p), &floored(q)))
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    check_dist(p, q)?;
    let (a, b) = (floored(p), floored(q));
    let m: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| 0.5 * (x + y)).collect();
    // summing the two halves termwise keeps js(p, q) == js(q, p) exactly
    let s: f64 = a
        .iter()
        .zip(&b)
        .zip(&m)
        .map(|((&x, &y), &mi)| {
            let tx = if x == mi { 0.0 } else { x * (x / mi).log2() };
            let ty = if y == mi { 0.0 } else { y * (y / mi).log2() };
            0.5 * tx + 0.5 * ty
        })
        .sum();
    Ok(s.clamp(0.0, 1.0))
}

/// First index where the sequences differ; a strict prefix flips at its
/// own length.
pub fn flip_index(a: &[u32], b: &[u32]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub l2: f64,
    pub cosine: f64,
}

/// L2 distance and cosine similarity between two hidden states.
pub fn layer_drift(h_on: &[f64], h_off: &[f64]) -> Result<Drift> {
    if h_on.len() != h_off.len() {
        return Err(contract("hidden state lengths differ"));
    }
    let l2 = h_on.iter().zip(h_off).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = h_on.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = h_off.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine of a zero vector".into()));
    }
    let dot: f64 = h_on.iter().zip(h_off).map(|(a, b)| a * b).sum();
    Ok(Drift { l2, cosine: (dot / (na * nb)).clamp(-1.0, 1.0) })
}

/// Per-head mean row KL between two `[position][head][key]` weight tensors.
pub fn attention_kl(on: &[Vec<Vec<f64>>], off: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if on.len() != off.len() || on.is_empty() {
        return Err(contract("attention tensors need the same nonzero number of positions"));
    }
    let heads = on[0].len();
    let mut acc = vec![0.0; heads];
    for (po, pf) in on.iter().zip(off) {
        if po.len() != heads || pf.len() != heads {
            return Err(contract("head counts differ"));
        }
        for (h, (ro, rf)) in po.iter().zip(pf).enumerate() {
            if ro.len() != rf.len() {
                return Err(contract("attention supports differ"));
            }
            let a: Vec<f32> = ro.iter().map(|&x| x as f32).collect();
            let b: Vec<f32> = rf.iter().map(|&x| x as f32).collect();
            acc[h] += kl_divergence(&a, &b)?;
        }
    }
    let n = on.len() as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// Percentage of the baseline divergence a patch removed; negative when the
/// patch made things worse.
pub fn recovery_pct(kl_base: f64, kl_patched: f64) -> Result<f64> {
    if kl_base.is_nan() || kl_base <= 0.0 {
        return Err(Error::Undefined(format!("recovery needs a positive baseline, got {kl_base}")));
    }
    Ok((kl_base - kl_patched) / kl_base * 100.0)
}

/// Per-step comparison of the two paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDivergence {
    pub step: usize,
    pub kl: f64,
    pub js: f64,
    pub top1_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub mean_kl: f64,
    pub mean_js: f64,
    pub flip_index: Option<usize>,
    pub diverged: bool,
}

fn top1(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Step rows over the common length of the two probability sequences.
pub fn step_divergences(on: &[Vec<f32>], off: &[Vec<f32>]) -> Result<Vec<StepDivergence>> {
    on.iter()
        .zip(off)
        .enumerate()
        .map(|(step, (p, q))| {
            Ok(StepDivergence { step, kl: kl_divergence(p, q)?, js: js_divergence(p, q)?, top1_match: top1(p) == top1(q) })
        })
        .collect()
}

/// Mean of per-step KL(on ‖ off).
pub fn mean_step_kl(on: &[Vec<f32>], off: &[Vec<f32>]) -> Result<f64> {
    let n = on.len().min(off.len());
    if n == 0 {
        return Err(contract("no steps to compare"));
    }
    let mut s = 0.0;
    for (p, q) in on.iter().zip(off) {
        s += kl_divergence(p, q)?;
    }
    Ok(s / n as f64)
}

pub fn summarize(steps: &[StepDivergence], tokens_on: &[u32], tokens_off: &[u32]) -> PairSummary {
    let n = steps.len().max(1) as f64;
    let flip = flip_index(tokens_on, tokens_off);
    PairSummary {
        mean_kl: steps.iter().map(|s| s.kl).sum::<f64>() / n,
        mean_js: steps.iter().map(|s| s.js).sum::<f64>() / n,
        flip_index: flip,
        diverged: flip.is_some(),
    }
}

pub const STEP_CSV_HEADER: [&str; 4] = ["step", "kl_bits", "js_bits", "top1_match"];

/// Writes `step,kl_bits,js_bits,top1_match` rows.
pub fn write_steps_csv<W: Write>(w: W, steps: &[StepDivergence]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(STEP_CSV_HEADER)?;
    for s in steps {
        wr.write_record([s.step.to_string(), s.kl.to_string(), s.js.to_string(), s.top1_match.to_string()])?;
    }
    wr.flush().map_err(crate::error::io_err("<csv>"))?;
    Ok(())
}
