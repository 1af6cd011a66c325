// SPDX-License-Identifier: MIT OR Apache-2.0

//! Root-cause falsification: accumulation-error profile, propagation
//! curves, K/V projection gap, flip/KL correlation and higher-precision
//! reruns.

use serde::{Deserialize, Serialize};

use super::behavioral::{run_behavioral, BehavioralReport, RunPairReport};
use super::campaign::{fmt_opt, CampaignDir};
use super::config::{DecodeSpec, FalsifyParams, StatsParams};
use crate::error::{contract, Error, Result};
use crate::harness::{Corpus, OFF_BLOCK};
use crate::model::Model;
use crate::precision::{accumulation_error_profile, multilayer_propagation_sim, ErrorProfile, Precision, ReductionOrder};
use crate::stats::{correlations, Correlations};

/// Largest over smallest mean relative error.
pub fn flatness_ratio(profile: &[ErrorProfile]) -> Result<f64> {
    let means = profile.iter().map(|p| p.mean_rel_error);
    let hi = means.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.fold(f64::INFINITY, f64::min);
    if profile.is_empty() || lo <= 0.0 {
        return Err(Error::Undefined("flatness ratio of an empty or zero profile".into()));
    }
    Ok(hi / lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationCurve {
    pub gain: f64,
    pub injection: f64,
    pub trajectory: Vec<f64>,
}

/// Per-layer joint versus token-by-token K/V difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvGap {
    pub layer: usize,
    pub k_max: f64,
    pub k_mean: f64,
    pub v_max: f64,
    pub v_mean: f64,
}

/// Gap between K/V computed jointly (the cache-OFF order) and token by
/// token (the cache-ON order) in precision `p`.
///
/// `inputs[l][t]` is the layer-`l` input at position `t` in binary64; each
/// is rounded to `p` before projection. Differences are divided by the
/// largest magnitude of the binary64 projection of the same position and
/// head (0/0 counts as 0).
pub fn kv_projection_gap_from_inputs(model: &Model, inputs: &[Vec<Vec<f64>>], p: Precision) -> Result<Vec<KvGap>> {
    let cfg = model.config();
    if inputs.len() != cfg.n_layers {
        return Err(contract(format!("expected inputs for {} layers, got {}", cfg.n_layers, inputs.len())));
    }
    let wm = model.working(p);
    let oracle = model.working(Precision::Double64Oracle);
    let d = cfg.head_dim;
    let mut out = Vec::with_capacity(cfg.n_layers);
    for (l, xs) in inputs.iter().enumerate() {
        if xs.len() < 2 {
            return Err(contract("kv_projection_gap needs at least 2 positions"));
        }
        let (mut km, mut ks, mut vm, mut vs, mut n) = (0.0f64, 0.0, 0.0f64, 0.0, 0usize);
        for (t, x) in xs.iter().enumerate() {
            if x.len() != cfg.d_model {
                return Err(contract("kv_projection_gap: input width differs from d_model"));
            }
            let xr: Vec<f64> = x.iter().map(|&v| p.round(v)).collect();
            let (kj, vj) = wm.project_kv(l, &xr, t, ReductionOrder::blocked(OFF_BLOCK));
            let (kt, vt) = wm.project_kv(l, &xr, t, ReductionOrder::Sequential);
            let (ko, vo) = oracle.project_kv(l, x, t, ReductionOrder::Sequential);
            for h in 0..cfg.n_kv_heads {
                let r = h * d..(h + 1) * d;
                let kn = ko[r.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let vn = vo[r.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for i in r {
                    let gk = rel(kj[i] - kt[i], kn);
                    let gv = rel(vj[i] - vt[i], vn);
                    km = km.max(gk);
                    vm = vm.max(gv);
                    ks += gk;
                    vs += gv;
                    n += 1;
                }
            }
        }
        out.push(KvGap { layer: l, k_max: km, k_mean: ks / n as f64, v_max: vm, v_mean: vs / n as f64 });
    }
    Ok(out)
}

fn rel(diff: f64, norm: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else {
        diff.abs() / norm
    }
}

/// [`kv_projection_gap_from_inputs`] on the binary64 hidden states of
/// `tokens`: the embedding for layer 0, the previous layer's output after.
pub fn kv_projection_gap(model: &Model, tokens: &[u32], p: Precision) -> Result<Vec<KvGap>> {
    if tokens.len() < 2 {
        return Err(contract("kv_projection_gap needs at least 2 tokens"));
    }
    let oracle = model.working(Precision::Double64Oracle);
    let full = oracle.forward_full(tokens, ReductionOrder::Sequential, false, None)?;
    let mut inputs = vec![tokens.iter().map(|&t| oracle.embedding(t)).collect::<Result<Vec<_>>>()?];
    for l in 1..model.config().n_layers {
        inputs.push(full.resid_out[l - 1].clone());
    }
    kv_projection_gap_from_inputs(model, &inputs, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateRow {
    pub precision: Precision,
    pub strategy: String,
    pub n_pairs: usize,
    pub n_diverged: usize,
    pub flip_rate: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalsifyReport {
    pub profile_sequential: Vec<ErrorProfile>,
    pub profile_blocked: Vec<ErrorProfile>,
    pub flatness_ratio: f64,
    pub propagation: Vec<PropagationCurve>,
    /// `(precision, per-layer gaps)`.
    pub kv_gap: Vec<(Precision, Vec<KvGap>)>,
    /// Over diverged half16 pairs; absent when there are too few or the
    /// data is constant.
    pub flip_kl: Option<Correlations>,
    pub flip_rates: Vec<FlipRateRow>,
    pub baseline: BehavioralReport,
}

fn flip_rows(r: &BehavioralReport) -> Vec<FlipRateRow> {
    r.conditions
        .iter()
        .map(|c| FlipRateRow {
            precision: c.precision,
            strategy: c.strategy.clone(),
            n_pairs: c.n_pairs,
            n_diverged: c.n_diverged,
            flip_rate: c.divergence_rate,
            mean_kl: c.mean_kl,
        })
        .collect()
}

/// Flip index against mean KL over the diverged pairs of `runs`.
pub fn flip_kl_correlation(runs: &[RunPairReport]) -> Result<Correlations> {
    let (flip, kl): (Vec<f64>, Vec<f64>) =
        runs.iter().filter_map(|r| r.summary.flip_index.map(|f| (f as f64, r.summary.mean_kl))).unzip();
    correlations(&flip, &kl)
}

/// All five sub-experiments. The baseline is a half16 behavioral run over
/// `corpus`, or `baseline` when one is already available.
#[allow(clippy::too_many_arguments)]
pub fn run_falsification(
    model: &Model,
    corpus: &Corpus,
    seeds: &[u64],
    strategies: &[DecodeSpec],
    fp: &FalsifyParams,
    sp: &StatsParams,
    baseline: Option<BehavioralReport>,
) -> Result<FalsifyReport> {
    let profile_sequential = accumulation_error_profile(&fp.lengths, fp.trials, fp.profile_seed, ReductionOrder::Sequential)?;
    let profile_blocked =
        accumulation_error_profile(&fp.lengths, fp.trials, fp.profile_seed, ReductionOrder::blocked(OFF_BLOCK))?;
    let flatness = flatness_ratio(&profile_sequential)?;
    let mut propagation = Vec::new();
    for &gain in &fp.gains {
        for &injection in &fp.injections {
            let trajectory = multilayer_propagation_sim(fp.sim_layers, injection, gain, 0.0)?;
            propagation.push(PropagationCurve { gain, injection, trajectory });
        }
    }
    let gap_tokens = Corpus::generate(1, fp.kv_gap_tokens, model.config().vocab_size, fp.profile_seed)?;
    let mut kv_gap = Vec::new();
    for p in [Precision::Half16, Precision::Single32, Precision::Double64Oracle] {
        kv_gap.push((p, kv_projection_gap(model, &gap_tokens.prompts[0], p)?));
    }
    let baseline = match baseline {
        Some(b) => b,
        None => run_behavioral(model, corpus, seeds, strategies, Precision::Half16, sp)?,
    };
    let flip_kl = match flip_kl_correlation(&baseline.runs) {
        Ok(c) => Some(c),
        Err(Error::InsufficientData(_) | Error::ZeroVariance(_)) => None,
        Err(e) => return Err(e),
    };
    let mut flip_rates = flip_rows(&baseline);
    for &p in fp.rerun_precisions.iter().filter(|&&p| p != Precision::Half16) {
        flip_rates.extend(flip_rows(&run_behavioral(model, corpus, seeds, strategies, p, sp)?));
    }
    Ok(FalsifyReport {
        profile_sequential,
        profile_blocked,
        flatness_ratio: flatness,
        propagation,
        kv_gap,
        flip_kl,
        flip_rates,
        baseline,
    })
}

pub fn write_falsify(dir: &CampaignDir, r: &FalsifyReport) -> Result<()> {
    let mut rows = Vec::new();
    for (order, prof) in [("sequential", &r.profile_sequential), ("blocked(8)", &r.profile_blocked)] {
        for e in prof {
            rows.push(vec![
                order.to_string(),
                e.length.to_string(),
                e.trials.to_string(),
                e.mean_rel_error.to_string(),
                e.std_rel_error.to_string(),
            ]);
        }
    }
    dir.write_metrics("accumulation_profile.csv", &["order", "length", "trials", "mean_rel_error", "std_rel_error"], &rows)?;
    let rows: Vec<Vec<String>> = r
        .propagation
        .iter()
        .flat_map(|c| {
            c.trajectory
                .iter()
                .enumerate()
                .map(move |(l, e)| vec![c.gain.to_string(), c.injection.to_string(), l.to_string(), e.to_string()])
        })
        .collect();
    dir.write_metrics("propagation.csv", &["gain", "injection", "layer", "error"], &rows)?;
    let rows: Vec<Vec<String>> = r
        .kv_gap
        .iter()
        .flat_map(|(p, gaps)| {
            gaps.iter().map(move |g| {
                vec![
                    p.name().to_string(),
                    g.layer.to_string(),
                    g.k_max.to_string(),
                    g.k_mean.to_string(),
                    g.v_max.to_string(),
                    g.v_mean.to_string(),
                ]
            })
        })
        .collect();
    dir.write_metrics("kv_projection_gap.csv", &["precision", "layer", "k_max", "k_mean", "v_max", "v_mean"], &rows)?;
    let c = r.flip_kl.as_ref();
    dir.write_metrics(
        "flip_kl_correlation.csv",
        &["flatness_ratio", "pearson_r", "pearson_p", "spearman_rho", "spearman_p"],
        &[vec![
            r.flatness_ratio.to_string(),
            fmt_opt(c.map(|c| c.pearson_r)),
            fmt_opt(c.map(|c| c.pearson_p)),
            fmt_opt(c.map(|c| c.spearman_rho)),
            fmt_opt(c.map(|c| c.spearman_p)),
        ]],
    )?;
    let rows: Vec<Vec<String>> = r
        .flip_rates
        .iter()
        .map(|f| {
            vec![
                f.precision.name().to_string(),
                f.strategy.clone(),
                f.n_pairs.to_string(),
                f.n_diverged.to_string(),
                f.flip_rate.to_string(),
                f.mean_kl.to_string(),
            ]
        })
        .collect();
    dir.write_metrics("falsify_flip_rates.csv", &["precision", "strategy", "n_pairs", "n_diverged", "flip_rate", "mean_kl"], &rows)
}
