use eqlib::equilibrium_ode::{
    find_bf_with, quadratic_g, DEFAULT_GRID_N, rescale_to_g, solve_canonical, solve_g, solve_g_auto, ShootingOptions,
};
use eqlib::{CostSpec, ModelParams, OdeKind, PowerTerm};

const G1: f64 = 1.25e-13;
const G2: f64 = 2.5e-13;
const SIGMA: f64 = 1.88;

fn agents(beta: f64) -> ModelParams {
    ModelParams::at_frictionless_start(G1, G2, SIGMA, beta, -beta, 2.46e11).unwrap()
}

/// OU stationary std for quadratic costs, computed from the drift directly.
fn ou_std(p: &ModelParams, lambda: f64) -> f64 {
    let kappa = (p.gamma_sigma2() / lambda).sqrt();
    (p.delta().powi(2) / (2.0 * kappa)).sqrt()
}

#[test]
fn quadratic_numeric_matches_closed_form() {
    let lam = 1.08e-10;
    let p = agents(2.19e10);
    let std = ou_std(&p, lam);
    let sol = solve_g(&CostSpec::power(2.0, lam).unwrap(), &p, 12.0 * std, 4001).unwrap();
    assert_eq!(sol.kind, OdeKind::Numeric);
    let k = ((G1 + G2) * SIGMA * SIGMA * lam / 2.0).sqrt();
    let mut worst = 0.0f64;
    for (x, g) in sol.grid.iter().zip(&sol.g_values) {
        if x.abs() <= 5.0 * std {
            worst = worst.max((g + k * x).abs());
        }
    }
    assert!(worst / (k * 5.0 * std) < 1e-6, "{worst:e}");
    assert!((sol.b_f / k - 1.0).abs() < 1e-8);
    sol.check_shape().unwrap();
    assert!(sol.ode_residual() < 1e-6, "{:e}", sol.ode_residual());
}

#[test]
fn power_15_residual_and_shape() {
    let p = agents(2.33e10);
    let spec = CostSpec::power(1.5, 5.22e-6).unwrap();
    let sol = solve_g_auto(&spec, &p, DEFAULT_GRID_N).unwrap();
    sol.check_shape().unwrap();
    assert!(sol.ode_residual() < 1e-6, "{:e}", sol.ode_residual());
    assert!((0.9..=1.1).contains(&sol.growth_ratio_at_xmax));
    assert!(sol.warnings.is_empty());
}

#[test]
fn composite_cost_solves() {
    let p = agents(2.3e10);
    let spec = CostSpec::composite(vec![
        PowerTerm { q: 2.0, lambda: 5e-11 },
        PowerTerm { q: 1.5, lambda: 2.5e-6 },
    ])
    .unwrap();
    let sol = solve_g_auto(&spec, &p, DEFAULT_GRID_N).unwrap();
    sol.check_shape().unwrap();
    assert!(sol.ode_residual() < 1e-6, "{:e}", sol.ode_residual());
}

#[test]
fn canonical_and_direct_agree_on_central_half() {
    for &(q, lam, beta) in &[(1.5, 5.22e-6, 2.33e10), (1.125, 0.019, 2.50e10)] {
        let p = agents(beta);
        let spec = CostSpec::power(q, lam).unwrap();
        let direct = solve_g_auto(&spec, &p, 4001).unwrap();
        let canon = solve_canonical(q, 16.0, 32001).unwrap();
        let scaled = rescale_to_g(&canon, q, lam, &p).unwrap();
        let half = 0.5 * direct.x_max();
        let mut sup = 0.0f64;
        let mut err = 0.0f64;
        for (x, g) in direct.grid.iter().zip(&direct.g_values) {
            if x.abs() <= half {
                let gs = scaled.g_at(*x).expect("scaled grid covers the direct one");
                sup = sup.max(g.abs());
                err = err.max((g - gs).abs());
            }
        }
        assert!(err / sup < 1e-4, "q = {q}: {:e}", err / sup);
        assert!(scaled.ode_residual() < 1e-6, "q = {q}: {:e}", scaled.ode_residual());
    }
}

#[test]
fn shooting_is_stable_under_tolerance_halving() {
    let p = agents(2.33e10);
    for spec in [CostSpec::power(1.5, 5.22e-6).unwrap(), CostSpec::power(2.0, 1.08e-10).unwrap()] {
        let x_max = solve_g_auto(&spec, &p, 1001).unwrap().x_max();
        let base = ShootingOptions::default();
        let b1 = find_bf_with(&spec, &p, x_max, base).unwrap();
        let half = ShootingOptions { rtol: 0.5 * base.rtol, ..base };
        let b2 = find_bf_with(&spec, &p, x_max, half).unwrap();
        assert!((b1 / b2 - 1.0).abs() < 1e-8, "{spec:?}: {:e}", b1 / b2 - 1.0);
    }
}

#[test]
fn quadratic_closed_form_kind() {
    let p = agents(2.19e10);
    let sol = quadratic_g(&p, 1.08e-10, 1e11, 101).unwrap();
    assert_eq!(sol.kind, OdeKind::ClosedQuadratic);
    assert!((sol.g_prime_values[0] + 8.46e-12).abs() < 0.01e-12);
    let law = sol.stationary_law().unwrap();
    // Quadrature on a grid covering about 3.4 std; only a loose check here.
    assert!(law.std > 0.0);
}

#[test]
fn csv_export_header() {
    let p = agents(2.19e10);
    let sol = quadratic_g(&p, 1.08e-10, 1e11, 5).unwrap();
    let mut buf = Vec::new();
    sol.write_csv(&mut buf, Some("probe")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# probe"));
    assert_eq!(lines.next(), Some("x,g,g_prime,trading_rate"));
    assert_eq!(text.lines().count(), 7);
}
