// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer hidden-state drift at decode step 1 and the same-weights GQA
//! ablation.
//!
//! Both paths are evaluated on the same tokens: the prompt followed by the
//! cache-ON path's first generated token. Drift at step 1 therefore reflects
//! numerical differences only, never a different input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::campaign::{fmt_opt, CampaignDir};
use crate::error::{Error, Result};
use crate::harness::{decode, path_states, CachePath, Corpus, DecodeConfig};
use crate::metrics::{attention_kl, layer_drift};
use crate::model::{Model, ModelConfig, PositionRecord};
use crate::precision::Precision;
use crate::stats::{correct_rows, mann_whitney_u_with, Alternative, Multiplicity, StatRow, TestResult};

/// Minimum examples per group for the rank tests.
pub const MIN_RANK_TEST_N: usize = 8;

/// Step-1 comparison of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDrift {
    /// Residual after layer 0's attention sublayer.
    pub first_attention_l2: f64,
    pub first_attention_cosine: f64,
    /// Per layer output.
    pub l2: Vec<f64>,
    pub cosine: Vec<f64>,
    /// `[layer][head]` attention KL.
    pub attention_kl: Vec<Vec<f64>>,
}

/// The two paths' records at decode step 1 of `prompt` under teacher forcing.
pub fn step1_records(model: &Model, prompt: &[u32], p: Precision) -> Result<(PositionRecord, PositionRecord)> {
    let first = decode(model, prompt, &DecodeConfig::greedy(1), CachePath::CacheOn, p)?;
    let mut tokens = prompt.to_vec();
    tokens.push(first.generated[0]);
    let at = prompt.len();
    let mut on = path_states(model, &tokens, CachePath::CacheOn, p, at, true)?;
    let mut off = path_states(model, &tokens, CachePath::CacheOff, p, at, true)?;
    Ok((on.pop().expect("one record"), off.pop().expect("one record")))
}

pub fn example_drift(model: &Model, prompt: &[u32], p: Precision) -> Result<ExampleDrift> {
    let (on, off) = step1_records(model, prompt, p)?;
    let a = layer_drift(&on.resid_mid[0], &off.resid_mid[0])?;
    let mut l2 = Vec::new();
    let mut cosine = Vec::new();
    let mut akl = Vec::new();
    for l in 0..on.resid_out.len() {
        let d = layer_drift(&on.resid_out[l], &off.resid_out[l])?;
        l2.push(d.l2);
        cosine.push(d.cosine);
        akl.push(attention_kl(&[on.attention[l].clone()], &[off.attention[l].clone()])?);
    }
    Ok(ExampleDrift { first_attention_l2: a.l2, first_attention_cosine: a.cosine, l2, cosine, attention_kl: akl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDriftRow {
    pub layer: usize,
    pub mean_l2: f64,
    pub median_l2: f64,
    pub mean_cosine: f64,
    /// Largest per-head attention KL, averaged over examples.
    pub mean_max_head_attention_kl: f64,
    /// Layer output drift against the previous layer's, one-sided; absent
    /// for layer 0 or too few examples.
    pub test: Option<StatRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDriftReport {
    pub precision: Precision,
    pub n_examples: usize,
    pub first_attention_mean_l2: f64,
    pub first_attention_mean_cosine: f64,
    pub layers: Vec<LayerDriftRow>,
    pub examples: Vec<ExampleDrift>,
}

/// Drift table over `examples` (already chosen, typically by descending
/// mean KL).
pub fn run_layer_drift(model: &Model, examples: &[Vec<u32>], p: Precision, alpha: f64) -> Result<LayerDriftReport> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("layer drift needs at least one example".into()));
    }
    let ex: Vec<ExampleDrift> = examples.par_iter().map(|e| example_drift(model, e, p)).collect::<Result<_>>()?;
    let n = ex.len();
    let nl = ex[0].l2.len();
    let mean = |f: &dyn Fn(&ExampleDrift) -> f64| ex.iter().map(f).sum::<f64>() / n as f64;
    let mut layers = Vec::with_capacity(nl);
    for l in 0..nl {
        let mut col: Vec<f64> = ex.iter().map(|e| e.l2[l]).collect();
        let test = if l > 0 && n >= MIN_RANK_TEST_N {
            let prev: Vec<f64> = ex.iter().map(|e| e.l2[l - 1]).collect();
            mann_whitney_u_with(&col, &prev, Alternative::Greater).ok().map(|t| StatRow {
                method: format!("mann_whitney_u:layer{l}>layer{}", l - 1),
                ..StatRow::from(&t)
            })
        } else {
            None
        };
        layers.push(LayerDriftRow {
            layer: l,
            mean_l2: mean(&|e| e.l2[l]),
            median_l2: super::behavioral::median(&mut col).unwrap_or(f64::NAN),
            mean_cosine: mean(&|e| e.cosine[l]),
            mean_max_head_attention_kl: mean(&|e| e.attention_kl[l].iter().cloned().fold(0.0, f64::max)),
            test,
        });
    }
    let mut rows: Vec<StatRow> = layers.iter().filter_map(|r| r.test.clone()).collect();
    correct_rows(&mut rows, Multiplicity::BhFdr, alpha)?;
    let mut it = rows.into_iter();
    for r in layers.iter_mut().filter(|r| r.test.is_some()) {
        r.test = it.next();
    }
    Ok(LayerDriftReport {
        precision: p,
        n_examples: n,
        first_attention_mean_l2: mean(&|e| e.first_attention_l2),
        first_attention_mean_cosine: mean(&|e| e.first_attention_cosine),
        layers,
        examples: ex,
    })
}

pub const LAYER_DRIFT_HEADER: [&str; 11] = [
    "precision",
    "layer",
    "mean_l2",
    "median_l2",
    "mean_cosine",
    "mean_max_head_attention_kl",
    "n",
    "statistic",
    "p_value",
    "adjusted_p",
    "reject",
];

pub fn layer_drift_rows(r: &LayerDriftReport) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        r.precision.name().into(),
        "attn0".into(),
        r.first_attention_mean_l2.to_string(),
        "NA".into(),
        r.first_attention_mean_cosine.to_string(),
        "NA".into(),
        r.n_examples.to_string(),
        "NA".into(),
        "NA".into(),
        "NA".into(),
        "NA".into(),
    ]];
    for l in &r.layers {
        let t = l.test.as_ref();
        rows.push(vec![
            r.precision.name().into(),
            l.layer.to_string(),
            l.mean_l2.to_string(),
            l.median_l2.to_string(),
            l.mean_cosine.to_string(),
            l.mean_max_head_attention_kl.to_string(),
            r.n_examples.to_string(),
            fmt_opt(t.map(|t| t.statistic)),
            fmt_opt(t.map(|t| t.p_value)),
            fmt_opt(t.and_then(|t| t.adjusted_p)),
            t.and_then(|t| t.reject).map_or("NA".into(), |b| b.to_string()),
        ]);
    }
    rows
}

/// Same-weights GQA ablation: for each weight seed and ratio, the mean
/// first-attention drift at step 1 over a few prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqaAblation {
    pub precision: Precision,
    pub ratios: Vec<usize>,
    /// `[ratio][weight seed]`.
    pub drift: Vec<Vec<f64>>,
    pub mean_drift: Vec<f64>,
    /// Largest ratio against the smallest, one-sided (larger drift).
    pub test: Option<TestResult>,
    pub monotone: bool,
}

pub fn gqa_ablation(
    base: &ModelConfig,
    ratios: &[usize],
    weight_seeds: usize,
    prompts_per_seed: usize,
    prompt_len: usize,
    p: Precision,
) -> Result<GqaAblation> {
    if ratios.is_empty() || weight_seeds == 0 || prompts_per_seed == 0 {
        return Err(Error::InsufficientData("GQA ablation needs ratios, seeds and prompts".into()));
    }
    let mut cfgs = Vec::new();
    for &r in ratios {
        if r == 0 || base.n_heads % r != 0 {
            return Err(Error::Config(format!("ratio {r} does not divide {} heads", base.n_heads)));
        }
        let mut c = base.clone();
        c.n_kv_heads = base.n_heads / r;
        c.validate()?;
        cfgs.push(c);
    }
    let jobs: Vec<(usize, u64)> = (0..cfgs.len()).flat_map(|i| (0..weight_seeds as u64).map(move |s| (i, s))).collect();
    let vals: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let m = Model::init(cfgs[i].clone(), s)?;
            let corpus = Corpus::generate(prompts_per_seed, prompt_len, base.vocab_size, s)?;
            let mut acc = 0.0;
            for prompt in &corpus.prompts {
                let (on, off) = step1_records(&m, prompt, p)?;
                acc += layer_drift(&on.resid_mid[0], &off.resid_mid[0])?.l2;
            }
            Ok(acc / prompts_per_seed as f64)
        })
        .collect::<Result<_>>()?;
    let drift: Vec<Vec<f64>> = vals.chunks(weight_seeds).map(|c| c.to_vec()).collect();
    let mean_drift: Vec<f64> = drift.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
    let (lo, hi) = {
        let lo = (0..ratios.len()).min_by_key(|&i| ratios[i]).expect("nonempty");
        let hi = (0..ratios.len()).max_by_key(|&i| ratios[i]).expect("nonempty");
        (lo, hi)
    };
    let test = (lo != hi).then(|| mann_whitney_u_with(&drift[hi], &drift[lo], Alternative::Greater).ok()).flatten();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by_key(|&i| ratios[i]);
    let monotone = order.windows(2).all(|w| mean_drift[w[1]] >= mean_drift[w[0]]);
    Ok(GqaAblation { precision: p, ratios: ratios.to_vec(), drift, mean_drift, test, monotone })
}

/// Writes `layer_drift.csv`, `attention_kl.csv`, `gqa_ablation.csv` and the
/// significance table.
pub fn write_layer_drift(dir: &CampaignDir, reports: &[LayerDriftReport], gqa: Option<&GqaAblation>) -> Result<()> {
    let rows: Vec<Vec<String>> = reports.iter().flat_map(layer_drift_rows).collect();
    dir.write_metrics("layer_drift.csv", &LAYER_DRIFT_HEADER, &rows)?;
    let mut akl = Vec::new();
    for r in reports {
        let heads = r.examples[0].attention_kl[0].len();
        for l in 0..r.layers.len() {
            for h in 0..heads {
                let m = r.examples.iter().map(|e| e.attention_kl[l][h]).sum::<f64>() / r.n_examples as f64;
                akl.push(vec![r.precision.name().into(), l.to_string(), h.to_string(), m.to_string()]);
            }
        }
    }
    dir.write_metrics("attention_kl.csv", &["precision", "layer", "head", "mean_kl_bits"], &akl)?;
    let mut stats: Vec<StatRow> = reports.iter().flat_map(|r| r.layers.iter().filter_map(|l| l.test.clone())).collect();
    if let Some(g) = gqa {
        let mut rows = Vec::new();
        for (i, r) in g.ratios.iter().enumerate() {
            for (s, v) in g.drift[i].iter().enumerate() {
                rows.push(vec![g.precision.name().into(), r.to_string(), s.to_string(), v.to_string()]);
            }
        }
        dir.write_metrics("gqa_ablation.csv", &["precision", "ratio", "weight_seed", "first_attention_l2"], &rows)?;
        if let Some(t) = &g.test {
            let hi = g.ratios.iter().max().expect("nonempty");
            let lo = g.ratios.iter().min().expect("nonempty");
            stats.push(StatRow { method: format!("mann_whitney_u:gqa_r{hi}>r{lo}"), ..StatRow::from(t) });
        }
    }
    dir.write_stats("layer_drift.csv", &stats)
}
