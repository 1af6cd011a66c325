// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioral characterization: paired decodes over a corpus.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::campaign::fmt_opt;
use super::config::{DecodeSpec, StatsParams};
use crate::error::Result;
use crate::harness::{paired_decode, Corpus, DecodeConfig, DecodeTrace, Strategy};
use crate::metrics::{step_divergences, summarize, PairSummary, StepDivergence};
use crate::model::Model;
use crate::precision::Precision;
use crate::stats::{
    bootstrap_ci_mean, correct_rows, mann_whitney_u_with, mcnemar, Alternative, Multiplicity, StatRow,
};

/// All metrics of one (prompt, seed, strategy, precision) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPairReport {
    pub prompt_id: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub precision: Precision,
    pub max_new_tokens: usize,
    #[serde(flatten)]
    pub summary: PairSummary,
    pub truncated: bool,
    pub tokens_on: Vec<u32>,
    pub tokens_off: Vec<u32>,
    pub steps: Vec<StepDivergence>,
}

/// Canonical ordering key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub precision: usize,
    pub strategy: &'static str,
    pub prompt_id: usize,
    pub seed: u64,
}

pub(crate) fn precision_rank(p: Precision) -> usize {
    Precision::ALL.iter().position(|&q| q == p).expect("listed")
}

impl RunPairReport {
    pub fn key(&self) -> RunKey {
        RunKey {
            precision: precision_rank(self.precision),
            strategy: self.strategy.name(),
            prompt_id: self.prompt_id,
            seed: self.seed,
        }
    }

    pub fn from_traces(prompt_id: usize, max_new_tokens: usize, on: &DecodeTrace, off: &DecodeTrace) -> Result<Self> {
        let steps = step_divergences(&on.per_step_probs, &off.per_step_probs)?;
        Ok(RunPairReport {
            prompt_id,
            seed: on.seed,
            strategy: on.strategy,
            precision: on.precision,
            max_new_tokens,
            summary: summarize(&steps, &on.generated, &off.generated),
            truncated: on.truncated || off.truncated,
            tokens_on: on.generated.clone(),
            tokens_off: off.generated.clone(),
            steps,
        })
    }
}

/// Decodes one pair.
pub fn run_pair(
    model: &Model,
    prompt_id: usize,
    prompt: &[u32],
    spec: &DecodeSpec,
    seed: u64,
    p: Precision,
) -> Result<RunPairReport> {
    let d = DecodeConfig { strategy: spec.strategy, max_new_tokens: spec.max_new_tokens, seed };
    let (on, off) = paired_decode(model, prompt, &d, p)?;
    RunPairReport::from_traces(prompt_id, spec.max_new_tokens, &on, &off)
}

struct Unit {
    precision: Precision,
    spec: DecodeSpec,
    prompt_id: usize,
    seeds: Vec<u64>,
}

/// Runs every (precision, strategy, prompt, seed) pair not already in
/// `done`, calling `on_done` as each unit completes. Greedy selection does
/// not consume randomness, so a greedy pair is decoded once and recorded
/// under every seed. The result is sorted by [`RunKey`].
pub fn run_pairs(
    model: &Model,
    corpus: &Corpus,
    specs: &[DecodeSpec],
    seeds: &[u64],
    precisions: &[Precision],
    done: Vec<RunPairReport>,
    on_done: &(dyn Fn(&RunPairReport) -> Result<()> + Sync),
) -> Result<Vec<RunPairReport>> {
    let mut have: BTreeMap<RunKey, RunPairReport> = done.into_iter().map(|r| (r.key(), r)).collect();
    let mut units = Vec::new();
    for &p in precisions {
        for spec in specs {
            for pid in 0..corpus.len() {
                let missing: Vec<u64> = seeds
                    .iter()
                    .copied()
                    .filter(|&s| {
                        let k = RunKey { precision: precision_rank(p), strategy: spec.strategy.name(), prompt_id: pid, seed: s };
                        !have.contains_key(&k)
                    })
                    .collect();
                if missing.is_empty() {
                    continue;
                }
                if spec.strategy.is_greedy() {
                    units.push(Unit { precision: p, spec: *spec, prompt_id: pid, seeds: missing });
                } else {
                    for s in missing {
                        units.push(Unit { precision: p, spec: *spec, prompt_id: pid, seeds: vec![s] });
                    }
                }
            }
        }
    }
    let fresh: Vec<Vec<RunPairReport>> = units
        .par_iter()
        .map(|u| {
            let base = run_pair(model, u.prompt_id, &corpus.prompts[u.prompt_id], &u.spec, u.seeds[0], u.precision)?;
            let out: Vec<RunPairReport> = u.seeds.iter().map(|&s| RunPairReport { seed: s, ..base.clone() }).collect();
            for r in &out {
                on_done(r)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    for r in fresh.into_iter().flatten() {
        have.insert(r.key(), r);
    }
    Ok(have.into_values().collect())
}

/// Aggregate over one (precision, strategy) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub precision: Precision,
    pub strategy: String,
    pub n_pairs: usize,
    pub n_diverged: usize,
    pub divergence_rate: f64,
    pub mean_kl: f64,
    pub kl_ci_lo: f64,
    pub kl_ci_hi: f64,
    pub mean_js: f64,
    pub median_flip: Option<f64>,
    pub mean_flip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Always,
    Sometimes,
    Never,
}

impl Stability {
    pub fn name(self) -> &'static str {
        match self {
            Stability::Always => "always",
            Stability::Sometimes => "sometimes",
            Stability::Never => "never",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub precision: Precision,
    pub strategy: String,
    pub prompt_id: usize,
    pub n_seeds: usize,
    pub n_diverged: usize,
    pub class: Stability,
}

/// Campaign report of the behavioral experiment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BehavioralReport {
    pub runs: Vec<RunPairReport>,
    pub conditions: Vec<ConditionSummary>,
    /// `(precision, strategy, flip index, count)`.
    pub flip_counts: Vec<(Precision, String, usize, usize)>,
    pub stability: Vec<StabilityRow>,
    pub tests: Vec<StatRow>,
}

impl BehavioralReport {
    pub fn condition(&self, p: Precision, strategy: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.precision == p && c.strategy == strategy)
    }
}

pub(crate) fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

type CondKey = (usize, &'static str);

fn group(runs: &[RunPairReport]) -> BTreeMap<CondKey, Vec<&RunPairReport>> {
    let mut g: BTreeMap<CondKey, Vec<&RunPairReport>> = BTreeMap::new();
    for r in runs {
        g.entry((precision_rank(r.precision), r.strategy.name())).or_default().push(r);
    }
    g
}

/// Aggregates sorted run records; performs no decoding.
pub fn aggregate(runs: Vec<RunPairReport>, sp: &StatsParams) -> Result<BehavioralReport> {
    let groups = group(&runs);
    let mut conditions = Vec::new();
    let mut flip_counts = Vec::new();
    let mut stability = Vec::new();
    for ((prank, strat), rs) in &groups {
        let p = Precision::ALL[*prank];
        let kls: Vec<f64> = rs.iter().map(|r| r.summary.mean_kl).collect();
        let n = rs.len();
        let n_div = rs.iter().filter(|r| r.summary.diverged).count();
        let ci = bootstrap_ci_mean(&kls, sp.bootstrap_resamples.max(1), sp.bootstrap_seed, sp.bootstrap_level)?;
        let mut flips: Vec<f64> = rs.iter().filter_map(|r| r.summary.flip_index).map(|f| f as f64).collect();
        let mean_flip = (!flips.is_empty()).then(|| flips.iter().sum::<f64>() / flips.len() as f64);
        conditions.push(ConditionSummary {
            precision: p,
            strategy: strat.to_string(),
            n_pairs: n,
            n_diverged: n_div,
            divergence_rate: n_div as f64 / n as f64,
            mean_kl: kls.iter().sum::<f64>() / n as f64,
            kl_ci_lo: ci.lo,
            kl_ci_hi: ci.hi,
            mean_js: rs.iter().map(|r| r.summary.mean_js).sum::<f64>() / n as f64,
            median_flip: median(&mut flips),
            mean_flip,
        });
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for f in rs.iter().filter_map(|r| r.summary.flip_index) {
            *hist.entry(f).or_default() += 1;
        }
        flip_counts.extend(hist.into_iter().map(|(f, c)| (p, strat.to_string(), f, c)));
        let mut per_prompt: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for r in rs {
            let e = per_prompt.entry(r.prompt_id).or_default();
            e.0 += 1;
            e.1 += r.summary.diverged as usize;
        }
        stability.extend(per_prompt.into_iter().map(|(pid, (ns, nd))| StabilityRow {
            precision: p,
            strategy: strat.to_string(),
            prompt_id: pid,
            n_seeds: ns,
            n_diverged: nd,
            class: if nd == ns {
                Stability::Always
            } else if nd == 0 {
                Stability::Never
            } else {
                Stability::Sometimes
            },
        }));
    }
    let tests = precision_tests(&groups, sp)?;
    Ok(BehavioralReport { runs, conditions, flip_counts, stability, tests })
}

// half16 against every other precision, per strategy: McNemar on the paired
// diverged outcomes and a one-sided rank test on mean KL.
fn precision_tests(groups: &BTreeMap<CondKey, Vec<&RunPairReport>>, sp: &StatsParams) -> Result<Vec<StatRow>> {
    let mut rows = Vec::new();
    let half = precision_rank(Precision::Half16);
    for ((prank, strat), other) in groups {
        if *prank == half {
            continue;
        }
        let Some(base) = groups.get(&(half, *strat)) else { continue };
        let by_key: BTreeMap<(usize, u64), bool> =
            other.iter().map(|r| ((r.prompt_id, r.seed), r.summary.diverged)).collect();
        let (mut b, mut c) = (0u64, 0u64);
        for r in base {
            if let Some(&o) = by_key.get(&(r.prompt_id, r.seed)) {
                match (r.summary.diverged, o) {
                    (true, false) => b += 1,
                    (false, true) => c += 1,
                    _ => {}
                }
            }
        }
        let label = format!("{strat}:half16_vs_{}", Precision::ALL[*prank].name());
        if let Ok(t) = mcnemar(b, c) {
            rows.push(StatRow { method: format!("{}:{label}", t.method), ..StatRow::from(&t) });
        }
        let x: Vec<f64> = base.iter().map(|r| r.summary.mean_kl).collect();
        let y: Vec<f64> = other.iter().map(|r| r.summary.mean_kl).collect();
        if let Ok(t) = mann_whitney_u_with(&x, &y, Alternative::Greater) {
            rows.push(StatRow { method: format!("{}:{label}", t.method), ..StatRow::from(&t) });
        }
    }
    correct_rows(&mut rows, Multiplicity::BhFdr, sp.alpha)?;
    Ok(rows)
}

pub(crate) fn condition_rows(r: &BehavioralReport) -> Vec<Vec<String>> {
    r.conditions
        .iter()
        .map(|c| {
            vec![
                c.precision.name().to_string(),
                c.strategy.clone(),
                c.n_pairs.to_string(),
                c.n_diverged.to_string(),
                c.divergence_rate.to_string(),
                c.mean_kl.to_string(),
                c.kl_ci_lo.to_string(),
                c.kl_ci_hi.to_string(),
                c.mean_js.to_string(),
                fmt_opt(c.median_flip),
                fmt_opt(c.mean_flip),
            ]
        })
        .collect()
}

pub const CONDITIONS_HEADER: [&str; 11] = [
    "precision",
    "strategy",
    "n_pairs",
    "n_diverged",
    "divergence_rate",
    "mean_kl_bits",
    "kl_ci_lo",
    "kl_ci_hi",
    "mean_js_bits",
    "median_flip_index",
    "mean_flip_index",
];

/// Writes the behavioral tables into a campaign directory.
pub fn write_behavioral(dir: &super::campaign::CampaignDir, r: &BehavioralReport) -> Result<()> {
    dir.finish_runs(&r.runs)?;
    dir.write_metrics("conditions.csv", &CONDITIONS_HEADER, &condition_rows(r))?;
    let flips: Vec<Vec<String>> = r
        .flip_counts
        .iter()
        .map(|(p, s, f, c)| vec![p.name().into(), s.clone(), f.to_string(), c.to_string()])
        .collect();
    dir.write_metrics("flip_index.csv", &["precision", "strategy", "flip_index", "count"], &flips)?;
    let stab: Vec<Vec<String>> = r
        .stability
        .iter()
        .map(|s| {
            vec![
                s.precision.name().into(),
                s.strategy.clone(),
                s.prompt_id.to_string(),
                s.n_seeds.to_string(),
                s.n_diverged.to_string(),
                s.class.name().into(),
            ]
        })
        .collect();
    dir.write_metrics("stability.csv", &["precision", "strategy", "prompt_id", "n_seeds", "n_diverged", "class"], &stab)?;
    let mut steps = Vec::new();
    for run in &r.runs {
        for s in &run.steps {
            steps.push(vec![
                run.precision.name().into(),
                run.strategy.name().into(),
                run.prompt_id.to_string(),
                run.seed.to_string(),
                s.step.to_string(),
                s.kl.to_string(),
                s.js.to_string(),
                s.top1_match.to_string(),
            ]);
        }
    }
    dir.write_metrics(
        "steps.csv",
        &["precision", "strategy", "prompt_id", "seed", "step", "kl_bits", "js_bits", "top1_match"],
        &steps,
    )?;
    dir.write_stats("behavioral.csv", &r.tests)
}

/// Behavioral characterization of `strategies` at one precision.
pub fn run_behavioral(
    model: &Model,
    corpus: &Corpus,
    seeds: &[u64],
    strategies: &[DecodeSpec],
    precision: Precision,
    sp: &StatsParams,
) -> Result<BehavioralReport> {
    if strategies.is_empty() {
        return Ok(BehavioralReport::default());
    }
    let runs = run_pairs(model, corpus, strategies, seeds, &[precision], Vec::new(), &|_| Ok(()))?;
    aggregate(runs, sp)
}

/// Distinct greedy prompts at `p` in descending mean-KL order (ties by
/// prompt id), at most `n`.
pub fn top_kl_prompts(runs: &[RunPairReport], p: Precision, n: usize) -> Vec<usize> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.precision == p && r.strategy.is_greedy()) {
        best.entry(r.prompt_id).or_insert(r.summary.mean_kl);
    }
    let mut v: Vec<(usize, f64)> = best.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(pid, _)| pid).collect()
}
