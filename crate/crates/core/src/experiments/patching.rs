// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation and KV-cache patching of the cache-OFF path with cache-ON
//! states.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::campaign::CampaignDir;
use crate::error::{contract, Error, Result};
use crate::harness::{decode_with, CachePath, DecodeConfig, DecodeOptions, DecodeTrace, PatchPlan};
use crate::metrics::{mean_step_kl, recovery_pct};
use crate::model::Model;
use crate::precision::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchMode {
    /// Residual after one layer at decode step 0.
    SingleLayer { layer: usize },
    /// Residuals after every layer at decode step 0.
    Cumulative,
    /// Every K/V entry, every step.
    KvCache,
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchMode::SingleLayer { layer } => write!(f, "single_layer({layer})"),
            PatchMode::Cumulative => f.write_str("cumulative"),
            PatchMode::KvCache => f.write_str("kv_cache"),
        }
    }
}

impl PatchMode {
    /// Every single-layer mode, then cumulative, then kv_cache.
    pub fn all(n_layers: usize) -> Vec<PatchMode> {
        let mut v: Vec<PatchMode> = (0..n_layers).map(|layer| PatchMode::SingleLayer { layer }).collect();
        v.push(PatchMode::Cumulative);
        v.push(PatchMode::KvCache);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub example_id: usize,
    pub mode: PatchMode,
    pub kl_base: f64,
    pub kl_patched: f64,
    pub pct_recovered: f64,
}

impl PatchOutcome {
    pub fn new(example_id: usize, mode: PatchMode, kl_base: f64, kl_patched: f64) -> Result<Self> {
        Ok(PatchOutcome { example_id, mode, kl_base, kl_patched, pct_recovered: recovery_pct(kl_base, kl_patched)? })
    }
}

struct Reference {
    on: DecodeTrace,
    kl_base: f64,
}

fn greedy_trace(model: &Model, prompt: &[u32], steps: usize, path: CachePath, p: Precision, opts: &DecodeOptions) -> Result<DecodeTrace> {
    decode_with(model, prompt, &DecodeConfig::greedy(steps), path, p, opts)
}

fn reference(model: &Model, prompt: &[u32], max_steps: usize, p: Precision) -> Result<Reference> {
    let opts = DecodeOptions { snapshot_steps: vec![0], keep_cache: true, ..Default::default() };
    let on = greedy_trace(model, prompt, max_steps, CachePath::CacheOn, p, &opts)?;
    let off = greedy_trace(model, prompt, max_steps, CachePath::CacheOff, p, &DecodeOptions::default())?;
    let kl_base = mean_step_kl(&on.per_step_probs, &off.per_step_probs)?;
    Ok(Reference { on, kl_base })
}

fn plan(on: &DecodeTrace, mode: PatchMode, n_layers: usize) -> Result<PatchPlan> {
    let resid = &on.snapshot(0).expect("step 0 captured").record.resid_out;
    Ok(match mode {
        PatchMode::SingleLayer { layer } => {
            if layer >= n_layers {
                return Err(contract(format!("patch layer {layer} out of range for {n_layers} layers")));
            }
            let mut residual = vec![None; n_layers];
            residual[layer] = Some(resid[layer].clone());
            PatchPlan { residual_step: 0, residual, kv_donor: None }
        }
        PatchMode::Cumulative => {
            PatchPlan { residual_step: 0, residual: resid.iter().cloned().map(Some).collect(), kv_donor: None }
        }
        PatchMode::KvCache => {
            PatchPlan { residual_step: 0, residual: Vec::new(), kv_donor: Some(on.cache.clone().expect("cache kept")) }
        }
    })
}

fn patched_kl(model: &Model, prompt: &[u32], r: &Reference, mode: PatchMode, max_steps: usize, p: Precision) -> Result<f64> {
    let opts = DecodeOptions { patch: Some(plan(&r.on, mode, model.config().n_layers)?), ..Default::default() };
    let t = greedy_trace(model, prompt, max_steps, CachePath::CacheOff, p, &opts)?;
    mean_step_kl(&r.on.per_step_probs, &t.per_step_probs)
}

/// Outcomes of every mode on every example, ordered by example then mode.
/// Examples whose two paths never differ (zero baseline) are listed in
/// `skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchingReport {
    pub precision: Precision,
    pub max_steps: usize,
    pub outcomes: Vec<PatchOutcome>,
    pub skipped: Vec<usize>,
}

impl PatchingReport {
    pub fn mean_recovery(&self, mode: PatchMode) -> Option<f64> {
        let v: Vec<f64> = self.outcomes.iter().filter(|o| o.mode == mode).map(|o| o.pct_recovered).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `examples` pairs an example id with its prompt.
pub fn run_patching(
    model: &Model,
    examples: &[(usize, Vec<u32>)],
    modes: &[PatchMode],
    max_steps: usize,
    p: Precision,
) -> Result<PatchingReport> {
    let n_layers = model.config().n_layers;
    for m in modes {
        if let PatchMode::SingleLayer { layer } = m {
            if *layer >= n_layers {
                return Err(contract(format!("patch layer {layer} out of range for {n_layers} layers")));
            }
        }
    }
    let per: Vec<Option<Vec<PatchOutcome>>> = examples
        .par_iter()
        .map(|(id, prompt)| {
            let r = reference(model, prompt, max_steps, p)?;
            if r.kl_base <= 0.0 {
                return Ok(None);
            }
            modes
                .iter()
                .map(|&m| PatchOutcome::new(*id, m, r.kl_base, patched_kl(model, prompt, &r, m, max_steps, p)?))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::new();
    let mut skipped = Vec::new();
    for ((id, _), o) in examples.iter().zip(per) {
        match o {
            Some(o) => outcomes.extend(o),
            None => skipped.push(*id),
        }
    }
    Ok(PatchingReport { precision: p, max_steps, outcomes, skipped })
}

/// Patches the cache-ON run with its own states and measures it against
/// the cache-OFF run; recovery is 0 by construction.
pub fn self_patch(model: &Model, example_id: usize, prompt: &[u32], mode: PatchMode, max_steps: usize, p: Precision) -> Result<PatchOutcome> {
    let r = reference(model, prompt, max_steps, p)?;
    if r.kl_base <= 0.0 {
        return Err(Error::Undefined("self-patch needs a pair whose paths differ".into()));
    }
    let off = greedy_trace(model, prompt, max_steps, CachePath::CacheOff, p, &DecodeOptions::default())?;
    let opts = DecodeOptions { patch: Some(plan(&r.on, mode, model.config().n_layers)?), ..Default::default() };
    let patched = greedy_trace(model, prompt, max_steps, CachePath::CacheOn, p, &opts)?;
    PatchOutcome::new(example_id, mode, r.kl_base, mean_step_kl(&patched.per_step_probs, &off.per_step_probs)?)
}

pub const PATCHING_HEADER: [&str; 6] = ["example_id", "mode", "kl_base", "kl_patched", "pct_recovered", "precision"];

pub fn write_patching(dir: &CampaignDir, r: &PatchingReport) -> Result<()> {
    let rows: Vec<Vec<String>> = r
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.example_id.to_string(),
                o.mode.to_string(),
                o.kl_base.to_string(),
                o.kl_patched.to_string(),
                o.pct_recovered.to_string(),
                r.precision.name().to_string(),
            ]
        })
        .collect();
    dir.write_metrics("patching.csv", &PATCHING_HEADER, &rows)?;
    let mut modes: Vec<PatchMode> = r.outcomes.iter().map(|o| o.mode).collect();
    modes.sort();
    modes.dedup();
    let rows: Vec<Vec<String>> = modes
        .iter()
        .map(|&m| {
            let n = r.outcomes.iter().filter(|o| o.mode == m).count();
            vec![m.to_string(), n.to_string(), r.mean_recovery(m).expect("mode present").to_string()]
        })
        .collect();
    dir.write_metrics("patching_summary.csv", &["mode", "n", "mean_pct_recovered"], &rows)
}
