// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::rng::{stream, Domain};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

// Reference values below were computed with scipy.stats.

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn distribution_tails() {
    assert!(close(chi2_1_sf(0.05), 0.8230632737581214, 1e-8));
    assert!(close(chi2_1_sf(4.05), 0.04417134490844271, 1e-8));
    assert!(close(student_t_sf(2.5, 7.0), 0.020496109292876437, 1e-8));
    assert!(close(student_t_sf(0.3, 30.0), 0.3831230526421764, 1e-8));
    assert!(close(normal_sf(3.0), 0.0013498980316300933, 1e-8));
    assert!(close(normal_sf(6.0), 9.865876450376946e-10, 1e-12));
}

#[test]
fn mcnemar_examples() {
    let r = mcnemar_with(10, 10, McNemarMethod::ChiSquare).unwrap();
    assert!(close(r.statistic, 0.05, 1e-12));
    assert!(close(r.p_value, 0.8230632737581214, 1e-8));
    let r = mcnemar_with(5, 15, McNemarMethod::ChiSquare).unwrap();
    assert!(close(r.statistic, 4.05, 1e-12));
    assert!(close(r.p_value, 0.04417134490844271, 1e-8));
    let r = mcnemar(0, 20).unwrap();
    assert_eq!(r.method, "mcnemar_exact");
    assert!(close(r.p_value, 2.0 * 0.5f64.powi(20), 1e-15));
    assert!(close(mcnemar(5, 15).unwrap().p_value, 0.04138946533203125, 1e-12));
    assert_eq!(mcnemar(10, 10).unwrap().p_value, 1.0);
    assert_eq!(mcnemar(30, 10).unwrap().method, "mcnemar");
    assert!(mcnemar(0, 0).is_err());
}

#[test]
fn mann_whitney_examples() {
    let a = [1.5, 2.0, 2.0, 3.1, 4.0, 4.0, 4.0, 5.2, 6.0, 7.7];
    let b = [2.0, 3.3, 4.0, 5.0, 6.1, 6.1, 8.0, 9.0, 9.5];
    let want = [
        (Alternative::TwoSided, 0.08434095062267573),
        (Alternative::Greater, 0.9647144971343815),
        (Alternative::Less, 0.042170475311337864),
    ];
    for (alt, p) in want {
        let r = mann_whitney_u_with(&a, &b, alt).unwrap();
        assert_eq!(r.statistic, 23.5);
        assert!(close(r.p_value, p, 1e-8), "{alt:?} {}", r.p_value);
    }
    assert!(mann_whitney_u(&a, &a).unwrap().p_value > 0.9);
    let x: Vec<f64> = (1..=20).map(f64::from).collect();
    let y: Vec<f64> = (101..=120).map(f64::from).collect();
    let r = mann_whitney_u(&x, &y).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(r.p_value < 1e-6);
    assert!(close(r.p_value, 6.795615128173358e-08, 1e-12));
    assert!(matches!(mann_whitney_u(&[3.0; 5], &[3.0; 5]), Err(crate::Error::ZeroVariance(_))));
    assert!(mann_whitney_u(&[], &[1.0]).is_err());
}

#[test]
fn correlation_examples() {
    let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.37 - 3.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!(close(pearson(&x, &y).unwrap().0, 1.0, 1e-12));
    let z: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!(close(pearson(&x, &z).unwrap().0, -1.0, 1e-12));

    let xs = [0.3, 1.2, 2.2, 2.9, 4.1, 5.5, 6.0, 7.3, 8.8, 9.1, 10.4, 11.0];
    let ys = [1.0, 0.7, 2.9, 2.1, 4.8, 3.9, 6.5, 5.2, 9.9, 7.7, 10.1, 12.5];
    let c = correlations(&xs, &ys).unwrap();
    assert!(close(c.pearson_r, 0.9522880617349457, 1e-12));
    assert!(close(c.pearson_p, 1.796940198515056e-06, 1e-10));
    assert!(close(c.spearman_rho, 0.965034965034965, 1e-12));
    assert!(close(c.spearman_p, 3.88098529962746e-07, 1e-10));
    let yt = [1.0, 1.0, 2.0, 2.0, 3.0, 5.0, 4.0, 4.0, 6.0, 8.0, 7.0, 9.0];
    let c = correlations(&xs, &yt).unwrap();
    assert!(close(c.spearman_rho, 0.9666215196613185, 1e-12));
    assert!(close(c.spearman_p, 3.085094493353527e-07, 1e-10));

    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(crate::Error::ZeroVariance(_))));
    assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
}

#[test]
fn planted_correlation_recovered() {
    // y = r·x + sqrt(1 − r²)·e has population correlation r
    let r = -0.2;
    let mut rng = stream(3, Domain::Synthetic, &[0]);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..10_000 {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        x.push(a);
        y.push(r * a + (1.0 - r * r).sqrt() * e);
    }
    let c = correlations(&x, &y).unwrap();
    assert!((c.pearson_r - r).abs() < 0.05, "{}", c.pearson_r);
    assert!((c.spearman_rho - r).abs() < 0.05);
}

#[test]
fn spearman_is_pearson_on_tie_free_ranks() {
    let mut rng = stream(5, Domain::Misc, &[0]);
    let x: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let (rx, ry) = (ranks(&x), ranks(&y));
    assert_eq!(correlations(&rx, &ry).unwrap().spearman_rho, pearson(&rx, &ry).unwrap().0);
}

#[test]
fn welch_examples() {
    let w1 = [5.1, 4.9, 6.2, 5.8, 6.0, 5.5, 5.3, 6.1];
    let w2 = [4.1, 4.4, 5.0, 3.9, 4.7, 4.2, 4.9, 4.0, 4.5, 3.8];
    let want = [
        (Alternative::TwoSided, 4.4608457502216555e-05),
        (Alternative::Greater, 2.2304228751108278e-05),
        (Alternative::Less, 0.999977695771249),
    ];
    for (alt, p) in want {
        let r = welch_t(&w1, &w2, alt).unwrap();
        assert!(close(r.statistic, 5.820192911452189, 1e-10));
        assert!(close(r.p_value, p, 1e-8), "{alt:?}");
    }
}

// realized 95% interval on {0,1}×500 with 10,000 resamples, seed 0
const COIN_CI: (f64, f64) = (0.47, 0.531);

#[test]
fn bootstrap_examples() {
    let c = bootstrap_ci_mean(&[2.5; 30], 200, 0, 0.95).unwrap();
    assert_eq!((c.lo, c.hi), (2.5, 2.5));
    let x: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
    let a = bootstrap_ci_mean(&x, 10_000, 0, 0.95).unwrap();
    let b = bootstrap_ci_mean(&x, 10_000, 0, 0.95).unwrap();
    assert_eq!(a, b);
    println!("coin interval {:?}", a);
    assert!(a.lo <= 0.5 && 0.5 <= a.hi && a.hi - a.lo < 0.1);
    assert_eq!((a.lo, a.hi), COIN_CI);
}

#[test]
fn multiplicity_examples() {
    let ps = [0.01, 0.02, 0.03];
    assert_eq!(multiplicity(&ps, Multiplicity::BhFdr, 0.05).unwrap().reject, vec![true, true, true]);
    assert_eq!(multiplicity(&ps, Multiplicity::Bonferroni, 0.05).unwrap().reject, vec![true, false, false]);
    assert!(multiplicity(&[], Multiplicity::BhFdr, 0.05).unwrap().reject.is_empty());
    let adj = multiplicity(&[0.04, 0.01, 0.03], Multiplicity::BhFdr, 0.05).unwrap().adjusted;
    assert!(close(adj[0], 0.04, 1e-15) && close(adj[1], 0.03, 1e-15) && close(adj[2], 0.04, 1e-15));
    assert!(multiplicity(&[1.5], Multiplicity::Bonferroni, 0.05).is_err());
}

#[test]
fn stats_csv_layout() {
    let mut rows = vec![
        StatRow::from(&mcnemar_with(5, 15, McNemarMethod::ChiSquare).unwrap()),
        StatRow::from(&mcnemar(0, 20).unwrap()),
    ];
    correct_rows(&mut rows, Multiplicity::Bonferroni, 0.05).unwrap();
    let mut buf = Vec::new();
    write_stats_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("method,statistic,p_value,adjusted_p,reject\nmcnemar,4.05,"));
    assert!(text.lines().nth(2).unwrap().ends_with(",true"));
}

proptest! {
    #[test]
    fn bh_superset_of_bonferroni(ps in prop::collection::vec(0.0f64..=1.0, 0..30), alpha in 0.001f64..0.2) {
        let bh = multiplicity(&ps, Multiplicity::BhFdr, alpha).unwrap();
        let bo = multiplicity(&ps, Multiplicity::Bonferroni, alpha).unwrap();
        for (a, b) in bh.reject.iter().zip(&bo.reject) {
            prop_assert!(*a || !*b);
        }
        for p in bh.adjusted.iter().chain(&bo.adjusted) {
            prop_assert!((0.0..=1.0).contains(p));
        }
    }

    #[test]
    fn p_values_in_unit_interval(x in prop::collection::vec(-5.0f64..5.0, 8..30), y in prop::collection::vec(-5.0f64..5.0, 8..30)) {
        for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
            if let Ok(r) = mann_whitney_u_with(&x, &y, alt) {
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
            if let Ok(r) = welch_t(&x, &y, alt) {
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
        }
    }
}
