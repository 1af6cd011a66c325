// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired, rank and correlation tests, bootstrap intervals and multiplicity
//! corrections.
//!
//! Distribution tails come from `statrs` (`erfc` and the regularised
//! incomplete beta function).

mod dist;
mod hypothesis;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use dist::{chi2_1_sf, normal_sf, student_t_sf, student_t_two_sided};
pub use hypothesis::{
    bootstrap_ci_mean, correlations, mann_whitney_u, mann_whitney_u_with, mcnemar, mcnemar_with, multiplicity,
    pearson, ranks, welch_t, Alternative, Correlations, Interval, McNemarMethod, Multiplicity, MultiplicityResult,
};

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n: Vec<usize>,
}

/// One row of a `stats/*.csv` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    pub adjusted_p: Option<f64>,
    pub reject: Option<bool>,
}

impl From<&TestResult> for StatRow {
    fn from(t: &TestResult) -> Self {
        StatRow { method: t.method.clone(), statistic: t.statistic, p_value: t.p_value, adjusted_p: None, reject: None }
    }
}

pub const STAT_CSV_HEADER: [&str; 5] = ["method", "statistic", "p_value", "adjusted_p", "reject"];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "NA".to_string(), T::to_string)
}

/// Writes `method,statistic,p_value,adjusted_p,reject`; absent values are `NA`.
pub fn write_stats_csv<W: Write>(w: W, rows: &[StatRow]) -> crate::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(STAT_CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.method.clone(),
            r.statistic.to_string(),
            r.p_value.to_string(),
            opt(&r.adjusted_p),
            opt(&r.reject),
        ])?;
    }
    wr.flush().map_err(crate::error::io_err("<csv>"))?;
    Ok(())
}

/// Applies a correction to `rows` in place, filling `adjusted_p` and `reject`.
pub fn correct_rows(rows: &mut [StatRow], method: Multiplicity, alpha: f64) -> crate::Result<()> {
    let ps: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
    let m = multiplicity(&ps, method, alpha)?;
    for (r, (adj, rej)) in rows.iter_mut().zip(m.adjusted.into_iter().zip(m.reject)) {
        r.adjusted_p = Some(adj);
        r.reject = Some(rej);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
