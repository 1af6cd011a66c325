// SPDX-License-Identifier: MIT OR Apache-2.0

//! Summary tables aggregated from a finished campaign's `runs.jsonl`. No
//! model is loaded and nothing is decoded.

use std::collections::BTreeMap;
use std::path::Path;

use super::behavioral::{aggregate, condition_rows, BehavioralReport, CONDITIONS_HEADER};
use super::boundary::boundary_from_pairs;
use super::campaign::{fmt_opt, load_runs, CampaignDir, CONFIG_FILE};
use super::config::CampaignConfig;
use crate::error::{Error, Result};
use crate::precision::Precision;

pub const TABLE_BEHAVIORAL: &str = "report_behavioral.csv";
pub const TABLE_PRECISION: &str = "report_precision.csv";
pub const TABLE_BOUNDARY: &str = "report_boundary.csv";

/// Aggregates `root/runs.jsonl` into the three report tables under
/// `root/metrics`. Parameters come from `root/config.json` when present.
pub fn run_report(root: &Path) -> Result<BehavioralReport> {
    let runs = load_runs(root)?;
    let cfg_path = root.join(CONFIG_FILE);
    let cfg = if cfg_path.exists() { CampaignConfig::load(&cfg_path)? } else { CampaignConfig::default() };
    let r = aggregate(runs, &cfg.stats)?;
    let dir = CampaignDir::open(root, true)?;
    dir.write_metrics(TABLE_BEHAVIORAL, &CONDITIONS_HEADER, &condition_rows(&r))?;

    // flip rate and mean KL per precision, with the ratio to half16
    let half: BTreeMap<&str, f64> =
        r.conditions.iter().filter(|c| c.precision == Precision::Half16).map(|c| (c.strategy.as_str(), c.mean_kl)).collect();
    let rows: Vec<Vec<String>> = r
        .conditions
        .iter()
        .map(|c| {
            let ratio = half.get(c.strategy.as_str()).and_then(|&h| (c.mean_kl > 0.0).then(|| h / c.mean_kl));
            vec![
                c.strategy.clone(),
                c.precision.name().to_string(),
                c.n_pairs.to_string(),
                c.divergence_rate.to_string(),
                c.mean_kl.to_string(),
                fmt_opt(ratio),
            ]
        })
        .collect();
    dir.write_metrics(
        TABLE_PRECISION,
        &["strategy", "precision", "n_pairs", "flip_rate", "mean_kl_bits", "half16_kl_ratio"],
        &rows,
    )?;

    let mut rows = Vec::new();
    for c in &r.conditions {
        let (flip, kl): (Vec<usize>, Vec<f64>) = r
            .runs
            .iter()
            .filter(|x| x.precision == c.precision && x.strategy.name() == c.strategy)
            .filter_map(|x| x.summary.flip_index.map(|f| (f, x.summary.mean_kl)))
            .unzip();
        let mut row = vec![c.strategy.clone(), c.precision.name().to_string(), flip.len().to_string()];
        match boundary_from_pairs(&flip, &kl, &cfg.boundary) {
            Ok(b) => {
                row.push(b.all.pearson_r.to_string());
                row.push(b.all.spearman_rho.to_string());
                for t in [0usize, 3] {
                    let pc = b.partial.iter().find(|p| p.exclude_at_most == t).and_then(|p| p.correlations);
                    row.push(fmt_opt(pc.map(|c| c.pearson_r)));
                }
                row.push(b.welch.statistic.to_string());
                row.push(b.welch.p_value.to_string());
                row.push("ok".into());
            }
            Err(e @ (Error::InsufficientData(_) | Error::ZeroVariance(_))) => {
                row.extend(std::iter::repeat_n("NA".to_string(), 6));
                row.push(if matches!(e, Error::ZeroVariance(_)) { "zero_variance" } else { "insufficient_data" }.into());
            }
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    dir.write_metrics(
        TABLE_BOUNDARY,
        &[
            "strategy",
            "precision",
            "n_diverged",
            "pearson_r",
            "spearman_rho",
            "pearson_r_flip_gt_0",
            "pearson_r_flip_gt_3",
            "welch_t",
            "welch_p",
            "status",
        ],
        &rows,
    )?;
    Ok(r)
}
