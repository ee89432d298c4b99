mod common;

use common::{entry_params, ks_distance, power_density, reference_ladder, stationary_samples};
use eqlib::calibration::quadratic_turnover;
use eqlib::equilibrium_ode::{proportional_band, solve_g_auto, DEFAULT_GRID_N};
use eqlib::simulator::{equilibrium_returns, simulate_reflected, simulate_smooth, turnover_stats, SimConfig};
use eqlib::CostSpec;

#[test]
fn quadratic_turnover_tracks_the_analytic_value() {
    let cal = reference_ladder();
    let (p, lambda) = entry_params(&cal, Some(2.0));
    let ode = solve_g_auto(&CostSpec::power(2.0, lambda).unwrap(), &p, DEFAULT_GRID_N).unwrap();
    let paths = simulate_smooth(&ode, &p, &SimConfig::new(500.0, 0.0625, 32, 4)).unwrap();
    let stats = turnover_stats(&paths, 5).unwrap();
    let rg = cal.risk_aversions();
    let want = quadratic_turnover(&rg, p.sigma, lambda, p.beta1);
    let err = (stats.mean_daily / want - 1.0).abs();
    assert!(err < 4.0 * stats.std_error / want + 0.005, "{} vs {want}", stats.mean_daily);
    assert!((stats.mean_daily / stats.mean_from_totals - 1.0).abs() < 1e-12);
    assert!(stats.autocorrelations[0] > stats.autocorrelations[4]);
}

#[test]
fn reflected_state_never_leaves_the_band() {
    let cal = reference_ladder();
    let (p, lambda) = entry_params(&cal, None);
    let band = proportional_band(&p, lambda).unwrap();
    let mut cfg = SimConfig::new(300.0, 0.0625, 16, 8);
    cfg.record_every = 1;
    let paths = simulate_reflected(&p, lambda, &cfg).unwrap();
    assert!(paths.x.iter().all(|x| x.abs() <= band));
    let n = paths.n_records();
    for path in 0..paths.n_paths {
        for k in 1..n {
            let i = path * n + k;
            let (dl, du) = (paths.lower[i] - paths.lower[i - 1], paths.upper[i] - paths.upper[i - 1]);
            assert!(dl >= 0.0 && du >= 0.0);
            // Skorokhod decomposition: noise plus the two pushes, step by step.
            let dx = paths.x[i] - paths.x[i - 1];
            let noise = paths.delta * (paths.w[i] - paths.w[i - 1]);
            assert!((dx - noise - dl + du).abs() <= 1e-9 * band, "path {path} record {k}");
        }
    }
}

#[test]
fn simulated_power_state_matches_quadrature_density() {
    let cal = reference_ladder();
    let (p, lambda) = entry_params(&cal, Some(1.5));
    let spec = CostSpec::power(1.5, lambda).unwrap();
    let ode = solve_g_auto(&spec, &p, DEFAULT_GRID_N).unwrap();
    let std = ode.stationary_law().unwrap().std;
    let mut cfg = SimConfig::new(1200.0, 0.0625, 32, 13);
    cfg.record_every = 32;
    let paths = simulate_smooth(&ode, &p, &cfg).unwrap();
    let samples = stationary_samples(&paths, 100.0);
    let d = power_density(1.5, lambda, &p, std, 8.0, 4001);
    let ks = ks_distance(samples, &d.grid, &d.cdf());
    assert!(ks < 0.04, "KS = {ks}");
}

#[test]
fn equal_risk_aversions_give_frictionless_returns() {
    let cal = reference_ladder();
    let (mut p, lambda) = entry_params(&cal, Some(2.0));
    let g = 0.5 * (p.gamma1 + p.gamma2);
    p.gamma1 = g;
    p.gamma2 = g;
    let ode = solve_g_auto(&CostSpec::power(2.0, lambda).unwrap(), &p, 4001).unwrap();
    let paths = simulate_smooth(&ode, &p, &SimConfig::new(30.0, 0.0625, 4, 2)).unwrap();
    let mu = equilibrium_returns(&paths, &p);
    let frictionless = p.gamma_bar() * p.s * p.sigma * p.sigma;
    assert!(mu.iter().all(|m| (m - frictionless).abs() <= 1e-14 * frictionless));
}

#[test]
fn csv_has_header_and_one_row_per_record() {
    let cal = reference_ladder();
    let (p, lambda) = entry_params(&cal, None);
    let paths = simulate_reflected(&p, lambda, &SimConfig::new(10.0, 0.0625, 3, 1)).unwrap();
    let mut buf = Vec::new();
    paths.write_csv(&mut buf, Some("run 1")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# run 1"));
    let data: Vec<&str> = lines.filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "t,path_id,X,mu,rate_or_dL,dU,turnover");
    assert_eq!(data.len() - 1, paths.n_paths * paths.n_records());
}
