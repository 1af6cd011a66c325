// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding strategies and token selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK { k: usize, temperature: f64 },
    TopP { p: f64, temperature: f64 },
}

impl Strategy {
    pub const fn top_k() -> Self {
        Strategy::TopK { k: DEFAULT_TOP_K, temperature: DEFAULT_TEMPERATURE }
    }

    pub const fn top_p() -> Self {
        Strategy::TopP { p: DEFAULT_TOP_P, temperature: DEFAULT_TEMPERATURE }
    }

    /// Softmax temperature; greedy selection is temperature-free and uses 1.
    pub fn temperature(&self) -> f64 {
        match *self {
            Strategy::Greedy => 1.0,
            Strategy::TopK { temperature, .. } | Strategy::TopP { temperature, .. } => temperature,
        }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, Strategy::Greedy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::TopK { .. } => "top_k",
            Strategy::TopP { .. } => "top_p",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Greedy => Ok(()),
            Strategy::TopK { k, temperature } if k >= 1 && temperature > 0.0 => Ok(()),
            Strategy::TopP { p, temperature } if p > 0.0 && p <= 1.0 && temperature > 0.0 => Ok(()),
            s => Err(Error::Config(format!("invalid strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "top_k" | "top-k" | "topk" => Ok(Strategy::top_k()),
            "top_p" | "top-p" | "topp" => Ok(Strategy::top_p()),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (expected greedy, top_k or top_p)"))),
        }
    }
}

/// Full-vocabulary distribution of binary32 logits at temperature `t`,
/// computed in binary64 and stored as binary32.
pub fn softmax_probs(logits: &[f32], t: f64) -> Vec<f32> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = logits.iter().map(|&l| ((l as f64 - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| (x / z) as f32).collect()
}

fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

// Descending probability, lowest id first among equals.
fn ranked(probs: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Candidate set of a strategy, in descending-probability order.
pub fn candidate_set(probs: &[f32], strategy: &Strategy) -> Vec<usize> {
    match *strategy {
        Strategy::Greedy => vec![argmax(probs)],
        Strategy::TopK { k, .. } => {
            let mut r = ranked(probs);
            r.truncate(k.min(probs.len()));
            r
        }
        Strategy::TopP { p, .. } => {
            let r = ranked(probs);
            let mut cum = 0.0f64;
            let mut n = 0;
            for &i in &r {
                cum += probs[i] as f64;
                n += 1;
                if cum >= p {
                    break;
                }
            }
            r[..n].to_vec()
        }
    }
}

/// Selects a token from `probs` (already at the strategy's temperature).
///
/// Greedy ignores `rng`. The sampling strategies draw exactly one uniform
/// from `rng`, so two paths sharing a stream see the same draw.
pub fn sample_token<R: Rng + ?Sized>(probs: &[f32], strategy: &Strategy, rng: &mut R) -> Result<u32> {
    if probs.is_empty() || !probs.iter().any(|&p| p > 0.0) {
        return Err(contract("sample_token: distribution has no mass"));
    }
    let cands = candidate_set(probs, strategy);
    if strategy.is_greedy() {
        return Ok(cands[0] as u32);
    }
    let total: f64 = cands.iter().map(|&i| probs[i] as f64).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for &i in &cands {
        cum += probs[i] as f64;
        if u < cum {
            return Ok(i as u32);
        }
    }
    Ok(*cands.last().unwrap() as u32)
}
