use super::*;

fn small(family: Family, reps: usize) -> SimScenario {
    let mut s = SimScenario::new(family, 100, reps, 17);
    s.predictive_draws = 2000;
    s.mc_samples = 200;
    s
}

#[test]
fn generating_functions() {
    assert_eq!(s3(0.0), 0.0);
    assert_eq!(s3(1.0), 0.0);
    assert!((s1(0.5) - 2.0).abs() < 1e-15);
    assert!((s2(0.5) - std::f64::consts::E).abs() < 1e-15);
    for u in [0.0, 0.3, 1.0] {
        assert_eq!(s4(u), 0.0);
    }
}

#[test]
fn dataset_structure() {
    let s = SimScenario::new(Family::Poisson, 200, 1, 3);
    let d = simulate_dataset(&s, 0).unwrap();
    assert_eq!(d.y.len(), 200);
    assert!(d.smooth_values[3].iter().all(|v| *v == 0.0));
    for vals in &d.smooth_values {
        assert!(vals.iter().sum::<f64>().abs() < 1e-9);
    }
    for i in 0..200 {
        assert_eq!(d.x[(i, 0)], 1.0);
        assert_eq!(d.x[(i, 1)], if i < 100 { 1.0 } else { 0.0 });
        assert!(d.u[1][i] >= 0.7 * d.u[0][i] && d.u[1][i] <= 0.7 * d.u[0][i] + 0.3);
        assert!(d.u[3][i] >= 0.9 * d.u[2][i] && d.u[3][i] <= 0.9 * d.u[2][i] + 0.1);
        let eta = -1.0 + 0.5 * d.x[(i, 1)] + d.smooth_values.iter().map(|v| v[i]).sum::<f64>();
        assert!((d.eta_true[i] - eta).abs() < 1e-12);
        assert!((d.mu_true[i] - eta.exp()).abs() < 1e-9 * d.mu_true[i]);
        assert_eq!(d.y[i].fract(), 0.0);
    }
}

#[test]
fn treatment_contrast_averages_to_half() {
    let s = SimScenario::new(Family::Normal, 1000, 1, 5);
    let reps = 200;
    let mut total = 0.0;
    for r in 0..reps {
        let d = simulate_dataset(&s, r).unwrap();
        let treated: f64 = d.eta_true.rows(0, 500).sum() / 500.0;
        let control: f64 = d.eta_true.rows(500, 500).sum() / 500.0;
        total += treated - control;
    }
    let mean = total / reps as f64;
    // Each contrast has SD about 0.13 from the smooth terms.
    assert!((mean - 0.5).abs() < 0.04, "{mean}");
}

#[test]
fn datasets_are_deterministic_per_replicate() {
    for family in [Family::Normal, Family::Poisson, Family::Bernoulli] {
        let s = SimScenario::new(family, 100, 3, 11);
        assert_eq!(simulate_dataset(&s, 2).unwrap(), simulate_dataset(&s, 2).unwrap());
        assert_ne!(simulate_dataset(&s, 1).unwrap().y, simulate_dataset(&s, 2).unwrap().y);
    }
}

#[test]
fn interval_score_arithmetic() {
    assert_eq!(interval_score(&[5.0], &[4.0], &[6.0], 0.05).unwrap(), 2.0);
    // A miss costs 2/alpha however far outside the interval it lands.
    assert_eq!(interval_score(&[9.0], &[4.0], &[6.0], 0.05).unwrap(), 42.0);
    assert_eq!(interval_score(&[-5.0], &[4.0], &[6.0], 0.05).unwrap(), 42.0);
    let y = [1.0; 10];
    let lo = [0.0; 10];
    let hi = [3.0; 10];
    assert_eq!(interval_score(&y, &lo, &hi, 0.05).unwrap(), 30.0);
    assert!(matches!(
        interval_score(&[1.0], &[2.0], &[1.0], 0.05),
        Err(GamError::CrossedBounds { index: 0, .. })
    ));
}

#[test]
fn scenario_validation() {
    let mut s = SimScenario::new(Family::Normal, 101, 1, 0);
    assert!(s.validate().is_err());
    s.n = 100;
    s.n_replicates = 0;
    assert!(s.validate().is_err());
    s.n_replicates = 1;
    assert!(s.validate().is_ok());
    s.n_holdout = 90;
    assert!(s.validate().is_err());
}

#[test]
fn holdout_is_disjoint_from_training_rows() {
    let s = small(Family::Normal, 5);
    for r in 0..5 {
        let split = replicate_split(&s, r).unwrap();
        assert_eq!(split.holdout.len(), 10);
        assert_eq!(split.train.len(), 90);
        let mut all: Vec<usize> = split.train.iter().chain(&split.holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}

#[test]
fn single_replicate_table_equals_its_row() {
    let s = small(Family::Normal, 1);
    let run = run_scenario(&s).unwrap();
    assert_eq!(run.replicates.len(), 1);
    let row = &run.replicates[0];
    let check = |name: &str, v: f64| {
        let m = run.summary.metric(name).unwrap();
        assert_eq!(m.mean, v);
        assert_eq!(m.median, v);
        assert_eq!(m.sd, 0.0);
    };
    check("mse_eta", row.mse_eta);
    check("mse_mu", row.mse_mu);
    check("mse_kappa2", row.mse_kappa2);
    check("bias_kappa2", row.bias_kappa2);
    check("ci_width_kappa2", row.ci_width_kappa2.unwrap());
    check("interval_score", row.interval_score);
    check("interval_width_mean", row.interval_width_mean);
    assert_eq!(run.summary.n_ci_available, 1);
    assert_eq!(run.summary.ci_coverage_kappa2, if row.ci_covered_kappa2.unwrap() { 1.0 } else { 0.0 });
}

#[test]
fn parallel_run_matches_sequential_replicates_and_is_reproducible() {
    let s = small(Family::Bernoulli, 4);
    let run = run_scenario(&s).unwrap();
    assert_eq!(run.summary.n_failed, 0, "{:?}", run.summary.failures);
    for (r, m) in run.replicates.iter().enumerate() {
        let mut seq = run_replicate(&s, r).unwrap();
        seq.fit_seconds = m.fit_seconds;
        assert_eq!(&seq, m);
    }
    let write = |run: &ScenarioRun| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        write_summary_csv(&run.summary, &mut a).unwrap();
        write_summary_json(&run.summary, &mut b).unwrap();
        write_replicates_csv(&run.replicates, &mut c).unwrap();
        (a, b, c)
    };
    let again = run_scenario(&s).unwrap();
    assert_eq!(write(&run), write(&again));
    let (csv_out, _, reps_out) = write(&run);
    let text = String::from_utf8(csv_out).unwrap();
    assert!(text.starts_with("metric,mean,median,sd\n"));
    assert!(text.contains("ci_coverage_kappa2"));
    assert!(!String::from_utf8(reps_out).unwrap().contains("fit_seconds"));
}

#[test]
fn poisson_replicate_metrics_are_sane() {
    let s = small(Family::Poisson, 1);
    let m = run_replicate(&s, 0).unwrap();
    assert!(m.converged);
    assert!(m.mse_eta > 0.0 && m.mse_eta < 5.0);
    assert!(m.ci_width_kappa2.unwrap() > 0.0);
    assert!(m.information_error.is_none());
    assert!(m.interval_score >= 10.0 * m.interval_width_mean - 1e-9);
    assert_eq!(m.mse_kappa2, m.bias_kappa2 * m.bias_kappa2);
}

#[test]
fn indefinite_information_keeps_the_replicate_without_an_interval() {
    // A nearly unpenalized smooth on sparse counts: the variational variance
    // of the total mean count exceeds the total count.
    let s = SimScenario::new(Family::Poisson, 100, 1, 1);
    let m = run_replicate(&s, 0).unwrap();
    assert!(m.converged);
    assert!(m.information_error.as_deref().unwrap().contains("singular"));
    assert_eq!(m.ci_covered_kappa2, None);
    assert_eq!(m.ci_width_kappa2, None);
    assert!(m.mse_eta.is_finite() && m.interval_score.is_finite());
    let run = run_scenario(&s).unwrap();
    assert_eq!((run.summary.n_completed, run.summary.n_ci_available), (1, 0));
    assert!(run.summary.ci_coverage_kappa2.is_nan());
}
