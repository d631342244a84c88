use wkh_core::equilibria::ClusterSpec;
use wkh_core::model::{sup_norm, vector_field, MarketParams, PreferenceState};
use wkh_core::verify::{run_suite, SuiteConfig, Verdict, CLAIMS};

fn config(gamma: f64, a: Vec<f64>) -> SuiteConfig {
    let mut cfg = SuiteConfig::new(MarketParams::new(gamma, a).unwrap());
    cfg.seed = 7;
    cfg.trials = 40;
    cfg.samples = 60;
    cfg.two_seller = Some((1.0, 2.0));
    cfg.cluster = Some(ClusterSpec::new(8, 7, 1.0, 1.5).unwrap());
    cfg
}

fn assert_all_pass(cfg: &SuiteConfig) {
    let reports = run_suite(cfg).unwrap();
    assert_eq!(reports.len(), CLAIMS.len());
    for r in &reports {
        assert!(
            r.passed(),
            "{} failed: {}",
            r.check_name,
            serde_json::to_string_pretty(r).unwrap()
        );
    }
}

#[test]
fn manifest_covers_every_claim() {
    let expected = [
        "simplex_decay",
        "gronwall_bound",
        "monotone_ordering",
        "eventual_ordering",
        "trapping",
        "cooperative_region",
        "convergence_census",
        "homogeneous_census",
        "contraction",
        "gradient_structure",
        "two_seller_regimes",
        "two_cluster_regimes",
    ];
    let names: Vec<_> = CLAIMS.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, expected);
    assert!(CLAIMS.iter().all(|(_, c)| !c.is_empty()));
}

#[test]
fn homogeneous_above_uniqueness_passes() {
    assert_all_pass(&config(0.4, vec![1.0; 3]));
}

#[test]
fn homogeneous_multistable_passes() {
    assert_all_pass(&config(2.0 / 7.0, vec![1.0; 3]));
}

#[test]
fn heterogeneous_contraction_passes() {
    let cfg = config(1.6, vec![1.0, 2.0, 3.0]);
    assert_all_pass(&cfg);
    let reports = run_suite(&cfg).unwrap();
    let c = reports.iter().find(|r| r.check_name == "contraction").unwrap();
    assert_eq!(c.verdict, Verdict::Pass);
    let h = reports.iter().find(|r| r.check_name == "homogeneous_census").unwrap();
    assert_eq!(h.verdict, Verdict::Skipped);
}

#[test]
fn heterogeneous_multistable_passes() {
    assert_all_pass(&config(0.3, vec![1.0, 1.5, 2.0, 2.5]));
}

#[test]
fn two_seller_market_runs_fold_check_on_itself() {
    let mut cfg = config(0.25, vec![1.0, 2.0]);
    cfg.two_seller = None;
    let reports = run_suite(&cfg).unwrap();
    let r = reports.iter().find(|r| r.check_name == "two_seller_regimes").unwrap();
    assert_eq!(r.verdict, Verdict::Pass);
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn corrupted_field_fails_with_counterexample() {
    let mut cfg = config(0.4, vec![1.0; 3]);
    cfg.field_bias = 0.05;
    let reports = run_suite(&cfg).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| r.verdict == Verdict::Fail).collect();
    assert!(!failed.is_empty());
    for r in &failed {
        let c = r.counterexample.as_ref().expect("failure carries a counterexample");
        assert_eq!(c.seed, r.seed);
    }
    assert!(failed.iter().any(|r| r.check_name == "simplex_decay"));
    assert!(failed.iter().any(|r| r.check_name == "convergence_census"));
}

#[test]
fn homogeneous_census_reports_extra_points_in_the_fold_window() {
    // a/N < γ < aN/(4(N-1)) for N = 3: same-sign root pairs exist.
    let mut cfg = config(0.35, vec![1.0; 3]);
    cfg.checks = Some(vec!["homogeneous_census".into()]);
    let reports = run_suite(&cfg).unwrap();
    let r = &reports[0];
    assert_eq!(r.verdict, Verdict::Fail);
    let witness = r.counterexample.as_ref().unwrap().state.clone().unwrap();
    let p = MarketParams::homogeneous(3, 1.0, 0.35).unwrap();
    let f = vector_field(&p, &PreferenceState::new(witness.clone()).unwrap()).unwrap();
    assert!(sup_norm(&f) < 1e-10, "witness is stationary");
    let spread = witness.iter().cloned().fold(f64::MIN, f64::max) - witness.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 1e-6, "witness is not the symmetric point");
}

#[test]
fn reports_are_deterministic() {
    let mut cfg = config(2.0 / 7.0, vec![1.0; 3]);
    cfg.trials = 16;
    let a = serde_json::to_string(&run_suite(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_suite(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn subset_runs_in_manifest_order() {
    let mut cfg = config(0.4, vec![1.0; 3]);
    cfg.checks = Some(vec!["gradient_structure".into(), "simplex_decay".into()]);
    let names: Vec<_> = run_suite(&cfg).unwrap().into_iter().map(|r| r.check_name).collect();
    assert_eq!(names, ["simplex_decay", "gradient_structure"]);
}
