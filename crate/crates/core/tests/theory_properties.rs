use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semifl::model::Matrix;
use semifl::theory::*;

fn random_classifier(seed: u64, n: usize, h: f64) -> KernelClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..=1u8)).collect();
    KernelClassifier::new(Matrix::from_vec(n, 2, x).unwrap(), y, h).unwrap()
}

/// Linear-scan box-kernel estimate.
fn brute_force(clf: &KernelClassifier, q: &[f64]) -> f64 {
    let h = clf.bandwidth();
    let (mut n, mut ones) = (0.0, 0.0);
    for (p, &y) in clf.points().iter_rows().zip(clf.labels()) {
        let norm2: f64 = p.iter().zip(q).map(|(a, b)| ((b - a) / h).powi(2)).sum();
        if norm2 <= 1.0 {
            n += 1.0;
            ones += y as f64;
        }
    }
    if n == 0.0 { 0.0 } else { ones / n }
}

#[test]
fn bayes_rule_has_zero_risk() {
    let task = SyntheticTask::default();
    let r = excess_risk(|x| task.bayes(x), &task, 5000, 3);
    assert_eq!(r.mean, 0.0);
    assert_eq!(r.se, 0.0);
}

#[test]
fn constant_wrong_rule_costs_the_margin() {
    let task = SyntheticTask {
        conditional: Conditional::Constant { p: 0.9 },
        ..Default::default()
    };
    let r = excess_risk(|_| 0, &task, 1000, 0);
    assert!((r.mean - 0.8).abs() < 1e-12);
}

#[test]
fn missing_labeled_set_trains_on_pseudo_labels_only() {
    let task = SyntheticTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (xi, yi) = task.sample_labeled(200, &mut rng);
    let m_init = KernelClassifier::new(xi, yi, 0.3).unwrap();
    let xu = task.sample_unlabeled(500, &mut rng);
    let sel = select_high_confidence(&m_init, &xu, 0.2);
    let high = augment_and_pseudolabel(&xu, &sel, &m_init, AugmentOperator::UniformShrink, &mut rng);
    let ssl = train_ssl(&Matrix::zeros(0, 1), &[], &high, 0.3).unwrap();
    assert_eq!(ssl.len(), sel.len());
    // shrinking toward the origin never leaves the source's half-line
    for (x, &src) in high.x.iter_rows().zip(&high.sources) {
        assert!(x[0].abs() <= xu.row(src)[0].abs());
        assert!(x[0] * xu.row(src)[0] >= 0.0);
    }
}

#[test]
fn pseudo_label_errors_are_bounded_by_slack_plus_estimation_error() {
    let task = SyntheticTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (xi, yi) = task.sample_labeled(2000, &mut rng);
    let m_init = KernelClassifier::new(xi, yi, 0.25).unwrap();
    let xu = task.sample_unlabeled(5000, &mut rng);
    let delta = 0.1;
    let sel = select_high_confidence(&m_init, &xu, delta);
    let high = augment_and_pseudolabel(&xu, &sel, &m_init, AugmentOperator::Identity, &mut rng);
    let sup_err = sel
        .iter()
        .map(|&i| (m_init.nw_estimate(xu.row(i)) - task.m(xu.row(i))).abs())
        .fold(0.0, f64::max);
    // chance that a fresh label disagrees with the pseudo-label, against the true m
    let err: f64 = high
        .x
        .iter_rows()
        .zip(&high.labels)
        .map(|(x, &y)| if y == 1 { 1.0 - task.m(x) } else { task.m(x) })
        .sum::<f64>()
        / sel.len() as f64;
    assert!(!sel.is_empty());
    assert!(err <= delta + sup_err, "error {err} > {delta} + {sup_err}");
}

#[test]
fn rate_table_is_reproducible_and_serializes() {
    let cfg = TheoryConfig {
        n_u_grid: vec![300],
        mc_samples: 500,
        ..Default::default()
    };
    let task = SyntheticTask::default();
    let a = rate_experiment(&task, &cfg, &[7]).unwrap();
    let b = rate_experiment(&task, &cfg, &[7]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 1);
    assert_eq!(a.rows[0].n_la, 17);
    let mut out = Vec::new();
    a.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n_u,n_la,seed,risk_ssl,risk_labeled,slope_fit");
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn config_validation() {
    let ok = TheoryConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TheoryConfig { delta: 0.5, ..ok.clone() },
        TheoryConfig { zeta: 1.0, ..ok.clone() },
        TheoryConfig { n_u_grid: vec![800, 200], ..ok.clone() },
        TheoryConfig { n_u_grid: vec![], ..ok.clone() },
        TheoryConfig { mc_samples: 0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(rate_experiment(&SyntheticTask::default(), &ok, &[]).is_err());
}

#[test]
fn least_squares_recovers_a_power_law() {
    let xs: Vec<f64> = [200.0f64, 800.0, 3200.0, 12800.0].iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 - x / 3.0).collect();
    assert!((ls_slope(&xs, &ys).unwrap() + 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn ssl_risk_decreases_along_the_grid() {
    let task = SyntheticTask::default();
    let cfg = TheoryConfig::default();
    let table = rate_experiment(&task, &cfg, &[0, 1, 2, 3, 4]).unwrap();
    for s in &table.summary {
        println!(
            "n_u={:6} n_la={:4} ssl={:.5} (se {:.5}) labeled={:.5}",
            s.n_u, s.n_la, s.median_ssl, s.se_ssl, s.median_labeled
        );
    }
    println!("slope {:?} theory {}", table.slope_fit, table.theoretical_slope);
    let bad: Vec<_> = table
        .summary
        .windows(2)
        .filter(|w| w[1].median_ssl > w[0].median_ssl)
        .collect();
    assert!(bad.len() <= 1);
    assert!(bad.iter().all(|w| w[1].median_ssl - w[0].median_ssl <= w[1].se_ssl.max(w[0].se_ssl)));
    let last = table.summary.last().unwrap();
    assert!(last.median_ssl < last.median_labeled);
    assert!(table.slope_fit.unwrap() < 0.0);
}

proptest! {
    #[test]
    fn index_matches_linear_scan(seed: u64, n in 1usize..60, h in 0.05f64..2.0, qx in -3.0f64..3.0, qy in -3.0f64..3.0) {
        let clf = random_classifier(seed, n, h);
        let m = clf.nw_estimate(&[qx, qy]);
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, brute_force(&clf, &[qx, qy]));
    }

    #[test]
    fn isolated_point_estimates_its_own_label(x in -5.0f64..5.0, y in 0u8..=1, h in 0.01f64..1.0) {
        let pts = Matrix::from_vec(2, 1, vec![x, x + 3.0 * h]).unwrap();
        let clf = KernelClassifier::new(pts, vec![y, 1 - y], h).unwrap();
        prop_assert_eq!(clf.nw_estimate(&[x]), y as f64);
    }

    #[test]
    fn selection_is_monotone_in_delta(
        values in proptest::collection::vec(proptest::option::of(0.0f64..=1.0), 0..40),
        d1 in 0.001f64..0.499,
        d2 in 0.001f64..0.499,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let small = select_by_estimates(&values, lo);
        let large = select_by_estimates(&values, hi);
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn risk_is_a_probability_weighted_margin(seed: u64, flip in 0.0f64..1.0) {
        let task = SyntheticTask::default();
        let r = excess_risk(|x| if (x[0] * 1000.0).fract().abs() < flip { 1 } else { 0 }, &task, 200, seed);
        prop_assert!((0.0..=1.0).contains(&r.mean));
        prop_assert!(r.se >= 0.0);
    }
}
