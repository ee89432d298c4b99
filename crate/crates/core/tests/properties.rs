mod common;

use common::{entry_params, reference_ladder};
use eqlib::deep_fbsde::{Dividend, FbsdeConfig, Trainer, VolMode};
use eqlib::equilibrium_ode::solve_g_auto;
use eqlib::simulator::{simulate_reflected, simulate_smooth, smooth_paths, SimConfig};
use eqlib::{CostSpec, ModelParams, OdeSolution, PowerTerm};
use proptest::prelude::*;

fn log_uniform(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo.ln()..hi.ln()).prop_map(f64::exp)
}

fn single_cost() -> impl Strategy<Value = CostSpec> {
    (1.1f64..=2.0, log_uniform(1e-10, 1e-1)).prop_map(|(q, l)| CostSpec::power(q, l).unwrap())
}

fn composite_cost() -> impl Strategy<Value = CostSpec> {
    prop::collection::vec((1.1f64..=2.0, log_uniform(1e-10, 1e-1)), 2..4).prop_map(|t| {
        CostSpec::composite(t.into_iter().map(|(q, lambda)| PowerTerm { q, lambda }).collect()).unwrap()
    })
}

fn assert_shape(sol: &OdeSolution) {
    let n = sol.grid.len();
    for i in 0..n {
        let (x, g) = (sol.grid[i], sol.g_values[i]);
        assert_eq!(g, -sol.g_values[n - 1 - i], "odd at x = {x:e}");
        assert!(x * g <= 0.0, "sign at x = {x:e}");
        if i > 0 {
            assert!(g <= sol.g_values[i - 1], "monotone at x = {x:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inverse_marginal_cost_round_trips(spec in prop_oneof![single_cost(), composite_cost()], rate in log_uniform(1e-4, 1e4)) {
        let c = spec.smooth("test").unwrap();
        let y = c.g_prime(rate);
        prop_assert!((c.g_prime_inverse(y) / rate - 1.0).abs() <= 1e-10);
        prop_assert!((c.g_prime_inverse(-y) / -rate - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn legendre_round_trips(spec in prop_oneof![single_cost(), composite_cost()], rate in log_uniform(1e-4, 1e4)) {
        let c = spec.smooth("test").unwrap();
        let y = c.g_prime(rate);
        let v = c.legendre(y);
        // The supremum is attained at the inverse marginal cost.
        prop_assert!((v / (y * rate - c.g(rate)) - 1.0).abs() <= 1e-10);
        prop_assert!((c.legendre_inverse(v) / y - 1.0).abs() <= 1e-10);
        prop_assert_eq!(c.legendre(-y), v);
    }

    #[test]
    fn fenchel_young_holds(spec in single_cost(), a in log_uniform(1e-4, 1e4), b in log_uniform(1e-4, 1e4)) {
        let c = spec.smooth("test").unwrap();
        let y = c.g_prime(b);
        prop_assert!(c.g(a) + c.legendre(y) >= a * y * (1.0 - 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn solved_g_is_odd_signed_and_monotone(q in 1.15f64..=2.0, scale in log_uniform(0.1, 10.0)) {
        let cal = reference_ladder();
        let (p, _) = entry_params(&cal, Some(2.0));
        // Same marginal cost as the quadratic calibration at the observed turnover.
        let lambda = scale * 1.07e-10 * 1.84e9f64.powf(2.0 - q);
        let sol = solve_g_auto(&CostSpec::power(q, lambda).unwrap(), &p, 2001).unwrap();
        assert_shape(&sol);
    }

    #[test]
    fn simulation_is_bit_reproducible(seed in any::<u64>(), antithetic in any::<bool>()) {
        let cal = reference_ladder();
        let (p, lambda) = entry_params(&cal, Some(1.5));
        let ode = solve_g_auto(&CostSpec::power(1.5, lambda).unwrap(), &p, 2001).unwrap();
        let mut cfg = SimConfig::new(20.0, 0.0625, 4, seed);
        cfg.antithetic = antithetic;
        let a = simulate_smooth(&ode, &p, &cfg).unwrap();
        prop_assert_eq!(&a, &simulate_smooth(&ode, &p, &cfg).unwrap());
        let other = SimConfig { seed: seed.wrapping_add(1), ..cfg.clone() };
        prop_assert_ne!(&a.x, &simulate_smooth(&ode, &p, &other).unwrap().x);
        let (pp, l1) = entry_params(&cal, None);
        let r = simulate_reflected(&pp, l1, &cfg).unwrap();
        prop_assert_eq!(&r, &simulate_reflected(&pp, l1, &cfg).unwrap());
    }

    #[test]
    fn moments_stay_bounded_from_any_start(q in prop_oneof![Just(2.0), Just(1.5)], start in -4.0f64..4.0, seed in 0u64..1000) {
        let cal = reference_ladder();
        let (p, lambda) = entry_params(&cal, Some(q));
        let ode = solve_g_auto(&CostSpec::power(q, lambda).unwrap(), &p, 4001).unwrap();
        let var = ode.stationary_law().unwrap().variance;
        let x0 = start * var.sqrt();
        let mut cfg = SimConfig::new(400.0, 0.0625, 32, seed);
        cfg.record_every = 16;
        let paths = smooth_paths(&ode, x0, p.delta(), &cfg).unwrap();
        let n = paths.n_records();
        let m = |k: usize, pow: i32| (0..paths.n_paths).map(|i| paths.x_at(i, k).powi(pow)).sum::<f64>() / paths.n_paths as f64;
        for k in 0..n {
            prop_assert!(m(k, 2) <= 3.0 * (x0 * x0 + var), "second moment grew at record {}", k);
        }
        let late: Vec<usize> = (n / 2..n).collect();
        let m2 = late.iter().map(|&k| m(k, 2)).sum::<f64>() / late.len() as f64;
        let m4 = late.iter().map(|&k| m(k, 4)).sum::<f64>() / late.len() as f64;
        prop_assert!(m2 > 0.6 * var && m2 < 1.6 * var, "late variance {:e} vs {:e}", m2, var);
        prop_assert!(m4 < 6.0 * var * var);
    }

    #[test]
    fn training_is_bit_reproducible(seed in any::<u64>(), endogenous in any::<bool>()) {
        let p = ModelParams::at_frictionless_start(1.25e-13, 2.5e-13, 1.88, 2.19e10, -2.19e10, 2.46e11).unwrap();
        let mode = if endogenous { VolMode::EndogenousVol } else { VolMode::ExogenousVol };
        let mut cfg = FbsdeConfig::new(mode, CostSpec::power(2.0, 1.08e-10).unwrap(), p, Dividend { a: 1.88, b: 6.3 });
        cfg.n_steps = 8;
        cfg.horizon = 4.0;
        cfg.n_iterations = 4;
        cfg.batch_size = 32;
        cfg.seed = seed;
        let run = |cfg: &FbsdeConfig| {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            t.run().unwrap();
            t
        };
        let (a, b) = (run(&cfg), run(&cfg));
        prop_assert_eq!(&a.nets, &b.nets);
        prop_assert_eq!(a.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), b.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
        let c = run(&FbsdeConfig { seed: seed ^ 1, ..cfg.clone() });
        prop_assert_ne!(&a.nets.params, &c.nets.params);
    }
}
