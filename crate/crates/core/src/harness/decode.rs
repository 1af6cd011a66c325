// SPDX-License-Identifier: MIT OR Apache-2.0

//! The token-by-token generation loop on either execution path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sampling::{sample_token, softmax_probs, Strategy};
use crate::error::{contract, Error, Result};
use crate::model::{ForwardPatch, HiddenState, KvCache, Model, PositionRecord, StepOptions, WorkingModel};
use crate::precision::{Precision, ReductionOrder};
use crate::rng::{stream, Domain};

/// Block size of the cache-OFF reduction order.
pub const OFF_BLOCK: usize = 8;

/// Execution path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePath {
    CacheOn,
    CacheOff,
}

impl CachePath {
    /// Sequential for cache-ON, blocked(8) for cache-OFF.
    pub fn order(self) -> ReductionOrder {
        match self {
            CachePath::CacheOn => ReductionOrder::Sequential,
            CachePath::CacheOff => ReductionOrder::blocked(OFF_BLOCK),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CachePath::CacheOn => "cache_on",
            CachePath::CacheOff => "cache_off",
        }
    }
}

impl fmt::Display for CachePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CachePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cache_on" | "on" => Ok(CachePath::CacheOn),
            "cache_off" | "off" => Ok(CachePath::CacheOff),
            _ => Err(Error::Config(format!("unknown path `{s}`"))),
        }
    }
}

/// How cache-OFF recomputation is carried out.
///
/// `Recompute` literally re-runs the full-prefix forward pass at every step.
/// `Memoized` keeps the per-position results of earlier steps, which are a
/// function of the prefix alone, and computes only the new position with
/// the same order. The two are bit-identical; `Memoized` is the default
/// because it is quadratically cheaper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffMode {
    #[default]
    Memoized,
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig { strategy: Strategy::Greedy, max_new_tokens, seed: 0 }
    }
}

/// Intervention applied to a decode.
#[derive(Debug, Clone, Default)]
pub struct PatchPlan {
    /// Decode step whose residual stream is overwritten.
    pub residual_step: usize,
    /// Per layer replacement for the residual after that layer.
    pub residual: Vec<Option<Vec<f64>>>,
    /// Donor cache substituted for every freshly computed K/V entry.
    pub kv_donor: Option<KvCache>,
}

/// Instrumentation and interventions for one decode.
#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    /// Decode steps whose per-layer states are kept.
    pub snapshot_steps: Vec<usize>,
    /// Whether snapshots include attention weights.
    pub capture_attention: bool,
    pub off_mode: OffMode,
    pub patch: Option<PatchPlan>,
    /// Tokens fed instead of the decode's own choices (teacher forcing);
    /// step `s` consumes `forced[s - 1]`.
    pub forced: Option<Vec<u32>>,
    /// Keep the cache-ON cache in the trace.
    pub keep_cache: bool,
}

/// Per-layer states captured at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSnapshot {
    pub step: usize,
    pub record: PositionRecord,
}

impl StepSnapshot {
    pub fn hiddens(&self) -> Vec<HiddenState> {
        self.record.hiddens()
    }
}

/// One path's generation.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    /// Full-vocabulary distributions, post-temperature, pre-truncation.
    pub per_step_probs: Vec<Vec<f32>>,
    pub per_layer_hiddens: Vec<StepSnapshot>,
    pub path: CachePath,
    pub precision: Precision,
    pub strategy: Strategy,
    pub seed: u64,
    /// Set when the position budget cut `max_new_tokens` short.
    pub truncated: bool,
    /// The path's cache after decoding (cache-ON with `keep_cache`).
    pub cache: Option<KvCache>,
}

impl DecodeTrace {
    pub fn snapshot(&self, step: usize) -> Option<&StepSnapshot> {
        self.per_layer_hiddens.iter().find(|s| s.step == step)
    }
}

/// Steps one path forward position by position.
struct Runner<'a> {
    wm: &'a WorkingModel,
    path: CachePath,
    mode: OffMode,
    cache: KvCache,
    tokens: Vec<u32>,
}

impl<'a> Runner<'a> {
    fn new(wm: &'a WorkingModel, path: CachePath, mode: OffMode) -> Self {
        let cfg = wm.config();
        Runner { wm, path, mode, cache: KvCache::new(cfg.n_layers, cfg.kv_dim()), tokens: Vec::new() }
    }

    fn literal(&self) -> bool {
        self.path == CachePath::CacheOff && self.mode == OffMode::Recompute
    }

    /// Feeds `token`. Returns the position record when `want` is set (or
    /// always on incremental paths).
    fn advance(&mut self, token: u32, want: bool, capture: bool, patch: Option<&ForwardPatch>) -> Result<Option<PositionRecord>> {
        let ord = self.path.order();
        if self.literal() {
            self.tokens.push(token);
            if !want {
                if token as usize >= self.wm.config().vocab_size {
                    return Err(contract(format!("token id {token} out of range")));
                }
                return Ok(None);
            }
            let full = self.wm.forward_full(&self.tokens, ord, capture, patch)?;
            let t = self.tokens.len() - 1;
            return Ok(Some(PositionRecord {
                position: t,
                logits: Some(full.logits[t].clone()),
                resid_mid: full.resid_mid.iter().map(|l| l[t].clone()).collect(),
                resid_out: full.resid_out.iter().map(|l| l[t].clone()).collect(),
                attention: if capture { full.attention.iter().map(|l| l[t].clone()).collect() } else { Vec::new() },
            }));
        }
        let opts = StepOptions { logits: want, capture_attention: capture, patch };
        let transient = self.path == CachePath::CacheOff && patch.is_some_and(|p| p.residual.iter().any(Option::is_some));
        if transient {
            // the next recomputation would not see this patch, so the memo
            // must advance unpatched
            let mut scratch = self.cache.clone();
            let rec = self.wm.step(token, &mut scratch, ord, opts)?;
            let clean = ForwardPatch { residual: Vec::new(), kv_donor: patch.and_then(|p| p.kv_donor.clone()) };
            let plain = StepOptions { logits: false, capture_attention: false, patch: Some(&clean) };
            self.wm.step(token, &mut self.cache, ord, plain)?;
            return Ok(Some(rec));
        }
        Ok(Some(self.wm.step(token, &mut self.cache, ord, opts)?))
    }
}

fn budget(wm: &WorkingModel, prompt: &[u32], max_new: usize) -> Result<(usize, bool)> {
    if prompt.is_empty() {
        return Err(contract("empty prompt"));
    }
    if max_new == 0 {
        return Err(contract("max_new_tokens must be positive"));
    }
    let maxp = wm.config().max_positions;
    if prompt.len() > maxp {
        return Err(contract(format!("prompt of {} tokens exceeds max_positions {maxp}", prompt.len())));
    }
    let room = maxp - prompt.len() + 1;
    Ok((max_new.min(room), max_new > room))
}

/// Decodes `prompt` on one path.
pub fn decode(model: &Model, prompt: &[u32], dcfg: &DecodeConfig, path: CachePath, p: Precision) -> Result<DecodeTrace> {
    decode_with(model, prompt, dcfg, path, p, &DecodeOptions::default())
}

/// [`decode`] with instrumentation and interventions.
pub fn decode_with(
    model: &Model,
    prompt: &[u32],
    dcfg: &DecodeConfig,
    path: CachePath,
    p: Precision,
    opts: &DecodeOptions,
) -> Result<DecodeTrace> {
    dcfg.strategy.validate()?;
    let wm = model.working(p);
    let (steps, truncated) = budget(wm, prompt, dcfg.max_new_tokens)?;
    let mut run = Runner::new(wm, path, opts.off_mode);
    let kv_only = opts.patch.as_ref().map(|pl| ForwardPatch { residual: Vec::new(), kv_donor: pl.kv_donor.clone() });
    let with_residual = opts.patch.as_ref().map(|pl| ForwardPatch { residual: pl.residual.clone(), kv_donor: pl.kv_donor.clone() });
    let background = kv_only.as_ref().filter(|pt| pt.kv_donor.is_some());

    for &t in &prompt[..prompt.len() - 1] {
        run.advance(t, false, false, background)?;
    }
    let t_temp = dcfg.strategy.temperature();
    let mut generated = Vec::with_capacity(steps);
    let mut probs_rows = Vec::with_capacity(steps);
    let mut snaps = Vec::new();
    let mut tok = prompt[prompt.len() - 1];
    for s in 0..steps {
        let snap = opts.snapshot_steps.contains(&s);
        let patch = match &opts.patch {
            Some(pl) if pl.residual_step == s => with_residual.as_ref(),
            _ => background,
        };
        let rec = run.advance(tok, true, snap && opts.capture_attention, patch)?.expect("record requested");
        let probs = softmax_probs(rec.logits.as_ref().expect("logits requested"), t_temp);
        let mut rng = stream(dcfg.seed, Domain::Sampling, &[s as u64]);
        let next = sample_token(&probs, &dcfg.strategy, &mut rng)?;
        if snap {
            snaps.push(StepSnapshot { step: s, record: rec });
        }
        generated.push(next);
        probs_rows.push(probs);
        tok = match &opts.forced {
            Some(f) if s < f.len() => f[s],
            _ => next,
        };
    }
    let cache = (opts.keep_cache && !run.literal()).then_some(run.cache);
    Ok(DecodeTrace {
        prompt: prompt.to_vec(),
        generated,
        per_step_probs: probs_rows,
        per_layer_hiddens: snaps,
        path,
        precision: p,
        strategy: dcfg.strategy,
        seed: dcfg.seed,
        truncated,
        cache,
    })
}

/// Decodes `prompt` on both paths with the same per-step random streams.
pub fn paired_decode(model: &Model, prompt: &[u32], dcfg: &DecodeConfig, p: Precision) -> Result<(DecodeTrace, DecodeTrace)> {
    let on = decode(model, prompt, dcfg, CachePath::CacheOn, p)?;
    let off = decode(model, prompt, dcfg, CachePath::CacheOff, p)?;
    Ok((on, off))
}

/// Per-position states of `tokens` on one path, from position `from` on.
pub fn path_states(
    model: &Model,
    tokens: &[u32],
    path: CachePath,
    p: Precision,
    from: usize,
    capture_attention: bool,
) -> Result<Vec<PositionRecord>> {
    let wm = model.working(p);
    let mut run = Runner::new(wm, path, OffMode::Memoized);
    let mut out = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        if let Some(rec) = run.advance(tok, t >= from, capture_attention && t >= from, None)? {
            if t >= from {
                out.push(rec);
            }
        }
    }
    Ok(out)
}
