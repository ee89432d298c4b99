use eqlib::calibration::{
    calibrate_ladder, canonical_for_stats, canonical_stats, ingest_timeseries, MarketData, CANONICAL_SPACING, LADDER,
};
use eqlib::equilibrium_ode::solve_canonical;
use eqlib::Error;
use std::io::Write;

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

#[test]
fn reference_ladder_matches_published_values() {
    let cal = calibrate_ladder(&MarketData::reference(), 2.0, &LADDER).unwrap();
    assert!(rel(cal.gamma_bar, 8.31e-14) < 0.01);
    // Closed forms to 2%, quadrature-based elasticities to 5%.
    let expect = [
        ("proportional", 0.31, 2.57e10, 0.02),
        ("q=2", 1.08e-10, 2.19e10, 0.02),
        ("q=1.5", 5.22e-6, 2.33e10, 0.05),
        ("q=1.125", 0.019, 2.50e10, 0.05),
    ];
    for (label, lam, beta, tol) in expect {
        let e = cal.entry(label).unwrap();
        assert!(rel(e.lambda, lam) < tol, "{label} lambda {:e}", e.lambda);
        assert!(rel(e.beta, beta) < tol, "{label} beta {:e}", e.beta);
        assert!(rel(e.analytic_turnover, 1.84e9) < 1e-9, "{label} turnover {:e}", e.analytic_turnover);
    }
    let target = cal.entry("proportional").unwrap().stationary_std;
    for e in &cal.entries {
        assert!(rel(e.stationary_std, target) < 1e-9, "{} std", e.label);
    }
}

#[test]
fn canonical_stats_for_quadratic_are_gaussian() {
    let (_, st) = canonical_for_stats(2.0, CANONICAL_SPACING).unwrap();
    assert!(rel(st.c_tilde, 1.0 / (2.0 * std::f64::consts::PI).sqrt()) < 1e-5, "{}", st.c_tilde);
    assert!(rel(st.v_tilde, 1.0) < 1e-5, "{}", st.v_tilde);
}

#[test]
fn canonical_stats_converge_under_refinement() {
    for q in [1.5, 1.125] {
        let (_, a) = canonical_for_stats(q, CANONICAL_SPACING).unwrap();
        let (_, b) = canonical_for_stats(q, 0.5 * CANONICAL_SPACING).unwrap();
        assert!(rel(a.c_tilde, b.c_tilde) < 1e-5, "q = {q}");
        assert!(rel(a.v_tilde, b.v_tilde) < 1e-5, "q = {q}");
    }
}

#[test]
fn short_canonical_grid_reports_tail() {
    let sol = solve_canonical(1.5, 2.0, 2001).unwrap();
    assert!(matches!(canonical_stats(&sol, 1.5), Err(Error::TailNotConverged { .. })));
}

#[test]
fn reports_contain_every_entry() {
    let cal = calibrate_ladder(&MarketData::reference(), 2.0, &[2.0]).unwrap();
    let kv = cal.to_key_value();
    assert!(kv.contains("gamma_bar=8.28"));
    assert!(kv.contains("proportional.band="));
    assert!(kv.contains("q2.lambda=1.0"));
    let json: serde_json::Value = serde_json::from_str(&cal.to_json().unwrap()).unwrap();
    assert_eq!(json["entries"].as_array().unwrap().len(), 2);
}

#[test]
fn ingest_from_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "date,price,volume,shares_outstanding").unwrap();
    for (i, p) in [100.0, 102.0, 101.0, 104.0].iter().enumerate() {
        writeln!(f, "2020-01-0{},{p},1000,50000", i + 1).unwrap();
    }
    let d = ingest_timeseries(f.path()).unwrap();
    assert!((d.mu_bar - 4.0 / 3.0).abs() < 1e-12);
    // diffs 2, -1, 3 with mean 4/3.
    let var = ((2.0f64 - 4.0 / 3.0).powi(2) + (-1.0f64 - 4.0 / 3.0).powi(2) + (3.0f64 - 4.0 / 3.0).powi(2)) / 2.0;
    assert!((d.sigma - var.sqrt()).abs() < 1e-12);
    assert!((d.lambda1 - 0.0025 * 101.75).abs() < 1e-12);
    assert!(matches!(ingest_timeseries("/no/such/file.csv"), Err(Error::Io(_))));
}
