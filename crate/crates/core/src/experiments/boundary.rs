// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decision-boundary analysis: does a pair that flips early carry more
//! divergence than one that flips late?

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::behavioral::RunPairReport;
use super::campaign::{fmt_opt, CampaignDir};
use super::config::BoundaryParams;
use crate::error::{contract, Error, Result};
use crate::rng::{stream, Domain};
use crate::stats::{correlations, welch_t, Alternative, Correlations, StatRow, TestResult};

/// Correlation over the pairs whose flip index exceeds `exclude_at_most`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCorrelation {
    pub exclude_at_most: usize,
    pub n: usize,
    pub correlations: Option<Correlations>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub n_diverged: usize,
    pub all: Correlations,
    pub partial: Vec<PartialCorrelation>,
    pub early_threshold: f64,
    pub late_threshold: f64,
    pub mean_kl_early: f64,
    pub mean_kl_late: f64,
    /// Early mean KL greater than late, one-sided.
    pub welch: TestResult,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (pos - i as f64) * (sorted[i + 1] - sorted[i])
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Analysis over diverged pairs given as parallel flip-index / mean-KL
/// columns.
pub fn boundary_from_pairs(flip: &[usize], kl: &[f64], bp: &BoundaryParams) -> Result<BoundaryReport> {
    if flip.len() != kl.len() {
        return Err(contract("flip and KL columns differ in length"));
    }
    if flip.len() < bp.min_diverged {
        return Err(Error::InsufficientData(format!(
            "boundary analysis needs {} diverged pairs, got {}",
            bp.min_diverged,
            flip.len()
        )));
    }
    let f: Vec<f64> = flip.iter().map(|&v| v as f64).collect();
    let all = correlations(&f, kl)?;
    let mut partial = Vec::new();
    for &t in &bp.exclude_flip_at_most {
        let (xs, ys): (Vec<f64>, Vec<f64>) = flip.iter().zip(kl).filter(|(&fl, _)| fl > t).map(|(&fl, &k)| (fl as f64, k)).unzip();
        let c = match correlations(&xs, &ys) {
            Ok(c) => Some(c),
            Err(Error::InsufficientData(_) | Error::ZeroVariance(_)) => None,
            Err(e) => return Err(e),
        };
        partial.push(PartialCorrelation { exclude_at_most: t, n: xs.len(), correlations: c });
    }
    let mut sorted = f.clone();
    sorted.sort_by(f64::total_cmp);
    let early_threshold = quantile(&sorted, bp.early_quantile);
    let late_threshold = quantile(&sorted, bp.late_quantile);
    let early: Vec<f64> = f.iter().zip(kl).filter(|(&x, _)| x <= early_threshold).map(|(_, &k)| k).collect();
    let late: Vec<f64> = f.iter().zip(kl).filter(|(&x, _)| x >= late_threshold).map(|(_, &k)| k).collect();
    let welch = welch_t(&early, &late, Alternative::Greater)?;
    Ok(BoundaryReport {
        n_diverged: flip.len(),
        all,
        partial,
        early_threshold,
        late_threshold,
        mean_kl_early: mean(&early),
        mean_kl_late: mean(&late),
        welch,
    })
}

/// Analysis over the diverged pairs of a campaign.
pub fn run_boundary_analysis(runs: &[RunPairReport], bp: &BoundaryParams) -> Result<BoundaryReport> {
    let (flip, kl): (Vec<usize>, Vec<f64>) =
        runs.iter().filter_map(|r| r.summary.flip_index.map(|f| (f, r.summary.mean_kl))).unzip();
    boundary_from_pairs(&flip, &kl, bp)
}

/// Planted campaign: flip = round(20 + 5 z1) clipped at 0 and
/// KL = 2 + 0.5 (r z1 + sqrt(1 - r^2) z2).
pub fn synthetic_campaign(n: usize, r: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(-1.0..=1.0).contains(&r) {
        return Err(contract(format!("planted correlation {r} outside [-1, 1]")));
    }
    let s = (1.0 - r * r).sqrt();
    Ok((0..n)
        .map(|i| {
            let mut rng = stream(seed, Domain::Synthetic, &[i as u64]);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            ((20.0 + 5.0 * z1).round().max(0.0) as usize, 2.0 + 0.5 * (r * z1 + s * z2))
        })
        .unzip())
}

/// Writes one block per labelled condition; a condition whose analysis
/// failed gets a status row naming the reason.
pub fn write_boundary(dir: &CampaignDir, results: &[(String, Result<BoundaryReport>)]) -> Result<()> {
    let mut corr = Vec::new();
    let mut split = Vec::new();
    let mut stats = Vec::new();
    for (label, res) in results {
        match res {
            Ok(r) => {
                corr.push(corr_row(label, "all", r.n_diverged, Some(&r.all), "ok"));
                for p in &r.partial {
                    let status = if p.correlations.is_some() { "ok" } else { "insufficient_data" };
                    corr.push(corr_row(label, &format!("flip>{}", p.exclude_at_most), p.n, p.correlations.as_ref(), status));
                }
                split.push(vec![
                    label.clone(),
                    r.early_threshold.to_string(),
                    r.late_threshold.to_string(),
                    r.mean_kl_early.to_string(),
                    r.mean_kl_late.to_string(),
                    r.welch.n[0].to_string(),
                    r.welch.n[1].to_string(),
                ]);
                stats.push(StatRow { method: format!("welch_t:{label}:early>late"), ..StatRow::from(&r.welch) });
                for (name, stat, p) in
                    [("pearson", r.all.pearson_r, r.all.pearson_p), ("spearman", r.all.spearman_rho, r.all.spearman_p)]
                {
                    stats.push(StatRow { method: format!("{name}:{label}"), statistic: stat, p_value: p, adjusted_p: None, reject: None });
                }
            }
            Err(e) => corr.push(corr_row(label, "all", 0, None, &status_of(e))),
        }
    }
    dir.write_metrics(
        "boundary_correlations.csv",
        &["condition", "subset", "n", "pearson_r", "pearson_p", "spearman_rho", "spearman_p", "status"],
        &corr,
    )?;
    dir.write_metrics(
        "boundary_split.csv",
        &["condition", "early_threshold", "late_threshold", "mean_kl_early", "mean_kl_late", "n_early", "n_late"],
        &split,
    )?;
    dir.write_stats("boundary.csv", &stats)
}

fn status_of(e: &Error) -> String {
    match e {
        Error::InsufficientData(_) => "insufficient_data".into(),
        Error::ZeroVariance(_) => "zero_variance".into(),
        other => format!("error: {other}"),
    }
}

fn corr_row(label: &str, subset: &str, n: usize, c: Option<&Correlations>, status: &str) -> Vec<String> {
    vec![
        label.to_string(),
        subset.to_string(),
        n.to_string(),
        fmt_opt(c.map(|c| c.pearson_r)),
        fmt_opt(c.map(|c| c.pearson_p)),
        fmt_opt(c.map(|c| c.spearman_rho)),
        fmt_opt(c.map(|c| c.spearman_p)),
        status.to_string(),
    ]
}
