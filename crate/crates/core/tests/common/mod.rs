//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use eqlib::calibration::{self, calibrate_ladder, CalibratedParams, MarketData, LADDER};
use eqlib::simulator::{stationary_density, PathSet, StationaryDensity};
use eqlib::ModelParams;

pub fn reference_ladder() -> CalibratedParams {
    calibrate_ladder(&MarketData::reference(), 2.0, &LADDER).unwrap()
}

/// Model parameters and cost level for ladder entry `q` (`None` = proportional).
pub fn entry_params(cal: &CalibratedParams, q: Option<f64>) -> (ModelParams, f64) {
    let e = cal.entry_for(q).unwrap();
    (cal.model_params(e).unwrap(), e.lambda)
}

/// Quadrature density of the power-cost state on `n` nodes over `width` std.
pub fn power_density(q: f64, lambda: f64, p: &ModelParams, std: f64, width: f64, n: usize) -> StationaryDensity {
    let (canon, _) = calibration::canonical_for_stats(q, calibration::CANONICAL_SPACING).unwrap();
    let grid: Vec<f64> = (0..n).map(|i| -width * std + 2.0 * width * std * i as f64 / (n - 1) as f64).collect();
    stationary_density(&canon, q, lambda, p, &grid).unwrap()
}

/// States of every path at records with time `>= burn_in`.
pub fn stationary_samples(paths: &PathSet, burn_in: f64) -> Vec<f64> {
    let first = paths.times.iter().position(|&t| t >= burn_in).unwrap();
    (0..paths.n_paths)
        .flat_map(|p| (first..paths.n_records()).map(move |k| (p, k)))
        .map(|(p, k)| paths.x_at(p, k))
        .collect()
}

/// Kolmogorov-Smirnov distance between samples and a tabulated CDF,
/// interpolated linearly and normalized to the tabulated mass.
pub fn ks_distance(mut samples: Vec<f64>, grid: &[f64], cdf: &[f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let mass = *cdf.last().unwrap();
    let model = |x: f64| {
        let j = grid.partition_point(|&g| g <= x);
        if j == 0 {
            return 0.0;
        }
        if j == grid.len() {
            return 1.0;
        }
        let w = (x - grid[j - 1]) / (grid[j] - grid[j - 1]);
        (cdf[j - 1] + w * (cdf[j] - cdf[j - 1])) / mass
    };
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = model(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

pub fn normal_cdf(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}
