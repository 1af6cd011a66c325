// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::{chi2_1_sf, normal_sf, student_t_sf, student_t_two_sided};
use super::TestResult;
use crate::error::{contract, Error, Result};
use crate::rng::{stream, Domain};

/// Which McNemar p-value to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    /// Exact binomial when `b + c < 25`, chi-square otherwise.
    #[default]
    Auto,
    ChiSquare,
    Exact,
}

/// McNemar's test on discordant counts, automatic p-value choice.
pub fn mcnemar(b: u64, c: u64) -> Result<TestResult> {
    mcnemar_with(b, c, McNemarMethod::Auto)
}

/// The statistic is always the continuity-corrected `(|b−c|−1)²/(b+c)`.
pub fn mcnemar_with(b: u64, c: u64, method: McNemarMethod) -> Result<TestResult> {
    let n = b + c;
    if n == 0 {
        return Err(Error::Undefined("McNemar test with no discordant pairs".into()));
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let stat = d * d / n as f64;
    let exact = match method {
        McNemarMethod::Auto => n < 25,
        McNemarMethod::ChiSquare => false,
        McNemarMethod::Exact => true,
    };
    let (name, p) = if exact { ("mcnemar_exact", binom_two_sided(b.min(c), n)) } else { ("mcnemar", chi2_1_sf(stat)) };
    Ok(TestResult { method: name.into(), statistic: stat, p_value: p, n: vec![n as usize] })
}

// 2·P(X ≤ k), X ~ Binomial(n, 1/2), capped at 1.
fn binom_two_sided(k: u64, n: u64) -> f64 {
    let mut term = 0.5f64.powi(n as i32);
    let mut cdf = term;
    for i in 0..k {
        term *= (n - i) as f64 / (i + 1) as f64;
        cdf += term;
    }
    (2.0 * cdf).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// First sample tends larger.
    Greater,
    Less,
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Two-sided Mann-Whitney U test.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<TestResult> {
    mann_whitney_u_with(x, y, Alternative::TwoSided)
}

/// Mann-Whitney U with the normal approximation, tie-corrected variance and
/// continuity correction. The statistic is `U` of `x`. Intended for at least
/// 8 observations per group.
pub fn mann_whitney_u_with(x: &[f64], y: &[f64], alt: Alternative) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientData("Mann-Whitney U needs two nonempty samples".into()));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let r = ranks(&all);
    let r1: f64 = r[..x.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let u2 = n1 * n2 - u1;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Err(Error::ZeroVariance("Mann-Whitney U: all observations tied".into()));
    }
    let mu = n1 * n2 / 2.0;
    let sd = var.sqrt();
    let p = match alt {
        Alternative::TwoSided => (2.0 * normal_sf((u1.max(u2) - mu - 0.5) / sd)).min(1.0),
        Alternative::Greater => normal_sf((u1 - mu - 0.5) / sd),
        Alternative::Less => normal_sf((u2 - mu - 0.5) / sd),
    };
    Ok(TestResult { method: "mann_whitney_u".into(), statistic: u1, p_value: p.clamp(0.0, 1.0), n: vec![x.len(), y.len()] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

fn corr_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / ((1.0 - r) * (1.0 + r))).sqrt();
    student_t_two_sided(t, df)
}

/// Pearson's r with its two-sided t-approximation p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(contract("correlation inputs differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("correlation needs at least 3 pairs, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("correlation input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, corr_p(r, x.len())))
}

/// Pearson on the raw data and on average ranks.
pub fn correlations(x: &[f64], y: &[f64]) -> Result<Correlations> {
    let (pr, pp) = pearson(x, y)?;
    let (sr, sp) = pearson(&ranks(x), &ranks(y))?;
    Ok(Correlations { pearson_r: pr, pearson_p: pp, spearman_rho: sr, spearman_p: sp })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test; `Greater` tests mean(x) > mean(y).
pub fn welch_t(x: &[f64], y: &[f64], alt: Alternative) -> Result<TestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InsufficientData("Welch's t needs two observations per group".into()));
    }
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let (a, b) = (v1 / x.len() as f64, v2 / y.len() as f64);
    let se2 = a + b;
    if se2 == 0.0 {
        return Err(Error::ZeroVariance("Welch's t with both groups constant".into()));
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (a * a / (x.len() as f64 - 1.0) + b * b / (y.len() as f64 - 1.0));
    let p = match alt {
        Alternative::TwoSided => student_t_two_sided(t, df),
        Alternative::Greater => student_t_sf(t, df),
        Alternative::Less => student_t_sf(-t, df),
    };
    Ok(TestResult { method: "welch_t".into(), statistic: t, p_value: p, n: vec![x.len(), y.len()] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + f * (sorted[i + 1] - sorted[i])
}

/// Percentile bootstrap interval for the mean. Resample `b` draws from the
/// stream keyed by `(seed, b)`.
pub fn bootstrap_ci_mean(x: &[f64], resamples: usize, seed: u64, level: f64) -> Result<Interval> {
    if x.is_empty() || resamples == 0 {
        return Err(contract("bootstrap needs data and at least one resample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(contract(format!("confidence level {level} outside (0, 1)")));
    }
    let n = x.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = stream(seed, Domain::Bootstrap, &[b as u64]);
            (0..n).map(|_| x[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    let lo = quantile(&means, a);
    let hi = quantile(&means, 1.0 - a).max(lo);
    Ok(Interval { lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    Bonferroni,
    BhFdr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityResult {
    pub reject: Vec<bool>,
    pub adjusted: Vec<f64>,
}

/// Bonferroni or Benjamini-Hochberg over a family of p-values.
pub fn multiplicity(p_values: &[f64], method: Multiplicity, alpha: f64) -> Result<MultiplicityResult> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(MultiplicityResult { reject: vec![], adjusted: vec![] });
    }
    let mf = m as f64;
    match method {
        Multiplicity::Bonferroni => Ok(MultiplicityResult {
            reject: p_values.iter().map(|&p| p <= alpha / mf).collect(),
            adjusted: p_values.iter().map(|&p| (p * mf).min(1.0)).collect(),
        }),
        Multiplicity::BhFdr => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
            let mut largest = None;
            for (i, &k) in order.iter().enumerate() {
                if p_values[k] <= (i + 1) as f64 / mf * alpha {
                    largest = Some(i);
                }
            }
            let mut reject = vec![false; m];
            if let Some(last) = largest {
                for &k in &order[..=last] {
                    reject[k] = true;
                }
            }
            let mut adjusted = vec![0.0; m];
            let mut running = 1.0f64;
            for (i, &k) in order.iter().enumerate().rev() {
                running = running.min(p_values[k] * mf / (i + 1) as f64);
                adjusted[k] = running.min(1.0);
            }
            Ok(MultiplicityResult { reject, adjusted })
        }
    }
}
