//! Monte Carlo simulation of the equilibrium state `X = phi^1 - phi_bar^1`.
//!
//! Smooth costs: Euler-Maruyama for `dX = (G')^{-1}(g(X)) dt + delta dW`.
//! Proportional costs: `X` is Brownian motion reflected at `+-l`, with the
//! local times `L` (lower) and `U` (upper) giving agent 1's purchases and
//! sales. Each step samples the maximum (or minimum) of the Brownian bridge
//! between the step endpoints, which removes the downward bias of plain
//! projection in the local times.
//!
//! Every path owns a ChaCha stream `(seed, path index)`, so results do not
//! depend on the number of worker threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium_ode::{fmt_num, rescale_constants, ModelParams, OdeKind, OdeSolution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub horizon_days: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep every `record_every`-th step. Turnover is summed over each
    /// recorded interval, and totals always use every step.
    pub record_every: usize,
}

impl SimConfig {
    pub fn new(horizon_days: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        SimConfig { horizon_days, dt, n_paths, seed, antithetic: false, record_every: 1 }
    }

    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParam(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon_days > 0.0 && self.horizon_days.is_finite()) {
            return Err(Error::InvalidParam(format!("horizon = {} must be positive", self.horizon_days)));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidParam("n_paths must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParam("record_every must be at least 1".into()));
        }
        let ratio = self.horizon_days / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidParam(format!(
                "horizon / dt = {ratio} is not an integer"
            )));
        }
        let n = n as usize;
        if n % self.record_every != 0 {
            return Err(Error::InvalidParam(format!(
                "{n} steps are not a multiple of record_every = {}",
                self.record_every
            )));
        }
        Ok(n)
    }

    fn n_records(&self) -> Result<usize> {
        Ok(self.n_steps()? / self.record_every + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Smooth,
    Reflected { band: f64 },
}

/// Simulated paths, stored path-major: entry `(p, k)` lives at
/// `p * n_records + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub kind: PathKind,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub x: Vec<f64>,
    /// Driving Brownian motion.
    pub w: Vec<f64>,
    /// Equilibrium expected return per day.
    pub mu: Vec<f64>,
    /// Trading rate of agent 1 (smooth kind; empty otherwise).
    pub rate: Vec<f64>,
    /// Cumulative lower and upper local times (reflected kind; empty otherwise).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `|d phi^1|` accumulated over the interval ending at each record; the
    /// first entry holds the initial jump, if any.
    pub turnover: Vec<f64>,
    /// Total turnover over `(0, T]` per path, at full step resolution.
    pub total_turnover: Vec<f64>,
    pub horizon: f64,
    /// Frictionless position of agent 1 and diffusion of the state, used to
    /// recover positions: `phi^1 = X + phi_bar - delta W`.
    pub frictionless_position: f64,
    pub delta: f64,
}

impl PathSet {
    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    fn idx(&self, p: usize, k: usize) -> usize {
        p * self.n_records() + k
    }

    pub fn x_at(&self, p: usize, k: usize) -> f64 {
        self.x[self.idx(p, k)]
    }

    /// Agent-1 position; agent 2 holds `s - phi1`.
    pub fn phi1_at(&self, p: usize, k: usize) -> f64 {
        let i = self.idx(p, k);
        self.x[i] + self.frictionless_position - self.delta * self.w[i]
    }

    pub fn phi2_at(&self, p: usize, k: usize, s: f64) -> f64 {
        s - self.phi1_at(p, k)
    }

    /// Writes `t,path_id,X,mu,rate_or_dL,dU,turnover`. For reflected paths
    /// `rate_or_dL` and `dU` are the local-time increments over the interval.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "# turnover counts one agent's |d phi^1| per recorded interval")?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "path_id", "X", "mu", "rate_or_dL", "dU", "turnover"])?;
        let n = self.n_records();
        for p in 0..self.n_paths {
            for k in 0..n {
                let i = self.idx(p, k);
                let (a, b) = match self.kind {
                    PathKind::Smooth => (self.rate[i], 0.0),
                    PathKind::Reflected { .. } => {
                        if k == 0 {
                            (self.lower[i], self.upper[i])
                        } else {
                            (self.lower[i] - self.lower[i - 1], self.upper[i] - self.upper[i - 1])
                        }
                    }
                };
                wr.write_record(&[
                    fmt_num(self.times[k]),
                    p.to_string(),
                    fmt_num(self.x[i]),
                    fmt_num(self.mu[i]),
                    fmt_num(a),
                    fmt_num(b),
                    fmt_num(self.turnover[i]),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

struct PathOut {
    x: Vec<f64>,
    w: Vec<f64>,
    rate: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    turnover: Vec<f64>,
    total: f64,
}

/// Generator for path `p`: antithetic pairs share one stream and the odd
/// member negates its normals.
fn path_rng(cfg: &SimConfig, p: usize) -> (ChaCha8Rng, f64) {
    let (stream, sign) = if cfg.antithetic { ((p / 2) as u64, if p % 2 == 1 { -1.0 } else { 1.0 }) } else { (p as u64, 1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (rng, sign)
}

fn record_times(cfg: &SimConfig, n_records: usize) -> Vec<f64> {
    (0..n_records).map(|k| (k * cfg.record_every) as f64 * cfg.dt).collect()
}

/// Euler-Maruyama paths of the smooth-cost state with explicit initial
/// value and diffusion. `simulate_smooth` is the usual entry point; this one
/// also serves probes such as zero diffusion.
pub fn smooth_paths(ode: &OdeSolution, x0: f64, delta: f64, cfg: &SimConfig) -> Result<PathSet> {
    if !matches!(ode.kind, OdeKind::Numeric | OdeKind::ClosedQuadratic) {
        return Err(Error::UnsupportedKind { op: "simulate_smooth" });
    }
    let cost = ode.smooth_cost().ok_or(Error::UnsupportedKind { op: "simulate_smooth" })?;
    let n_steps = cfg.n_steps()?;
    let n_rec = cfg.n_records()?;
    let dt = cfg.dt;
    let sq = dt.sqrt();
    let x_max = ode.x_max();
    let outs: Vec<Result<PathOut>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let (mut rng, sign) = path_rng(cfg, p);
            let mut out = PathOut {
                x: Vec::with_capacity(n_rec),
                w: Vec::with_capacity(n_rec),
                rate: Vec::with_capacity(n_rec),
                lower: Vec::new(),
                upper: Vec::new(),
                turnover: Vec::with_capacity(n_rec),
                total: 0.0,
            };
            let mut x = x0;
            let mut w = 0.0;
            let mut acc = 0.0;
            for k in 0..=n_steps {
                let g = ode.g_at(x).ok_or(Error::Extension { x, x_max })?;
                let r = cost.g_prime_inverse(g);
                if k % cfg.record_every == 0 {
                    out.x.push(x);
                    out.w.push(w);
                    out.rate.push(r);
                    out.turnover.push(acc);
                    acc = 0.0;
                }
                if k == n_steps {
                    break;
                }
                let z: f64 = rng.sample(StandardNormal);
                let dw = sign * sq * z;
                let step = r.abs() * dt;
                acc += step;
                out.total += step;
                x += r * dt + delta * dw;
                w += dw;
            }
            Ok(out)
        })
        .collect();
    gather(outs, PathKind::Smooth, cfg, n_rec, delta)
}

fn gather(outs: Vec<Result<PathOut>>, kind: PathKind, cfg: &SimConfig, n_rec: usize, delta: f64) -> Result<PathSet> {
    let mut set = PathSet {
        kind,
        times: record_times(cfg, n_rec),
        n_paths: cfg.n_paths,
        x: Vec::with_capacity(cfg.n_paths * n_rec),
        w: Vec::with_capacity(cfg.n_paths * n_rec),
        mu: Vec::new(),
        rate: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        turnover: Vec::with_capacity(cfg.n_paths * n_rec),
        total_turnover: Vec::with_capacity(cfg.n_paths),
        horizon: cfg.horizon_days,
        frictionless_position: 0.0,
        delta,
    };
    for o in outs {
        let o = o?;
        set.x.extend(o.x);
        set.w.extend(o.w);
        set.rate.extend(o.rate);
        set.lower.extend(o.lower);
        set.upper.extend(o.upper);
        set.turnover.extend(o.turnover);
        set.total_turnover.push(o.total);
    }
    Ok(set)
}

/// Equilibrium state, returns and turnover for a smooth cost.
pub fn simulate_smooth(ode: &OdeSolution, params: &ModelParams, cfg: &SimConfig) -> Result<PathSet> {
    let delta = params.nonzero_delta()?;
    let mut set = smooth_paths(ode, params.x0(), delta, cfg)?;
    set.frictionless_position = params.frictionless_position();
    set.mu = equilibrium_returns(&set, params);
    Ok(set)
}

/// Brownian motion with diffusion `delta` reflected at `+-band`, starting
/// from `x0_minus` (projected at time 0 with an initial local-time jump).
pub fn reflected_paths(band: f64, x0_minus: f64, delta: f64, cfg: &SimConfig) -> Result<PathSet> {
    if !(band > 0.0 && band.is_finite()) {
        return Err(Error::InvalidParam(format!("band half-width {band} must be positive")));
    }
    let n_steps = cfg.n_steps()?;
    let n_rec = cfg.n_records()?;
    let dt = cfg.dt;
    let sq = dt.sqrt();
    let s = delta.abs() * sq;
    let l = band;
    let outs: Vec<Result<PathOut>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let (mut rng, sign) = path_rng(cfg, p);
            let mut out = PathOut {
                x: Vec::with_capacity(n_rec),
                w: Vec::with_capacity(n_rec),
                rate: Vec::new(),
                lower: Vec::with_capacity(n_rec),
                upper: Vec::with_capacity(n_rec),
                turnover: Vec::with_capacity(n_rec),
                total: 0.0,
            };
            let mut cum_l = (-l - x0_minus).max(0.0);
            let mut cum_u = (x0_minus - l).max(0.0);
            let mut x = x0_minus.clamp(-l, l);
            let mut w = 0.0;
            let mut acc = cum_l + cum_u;
            for k in 0..=n_steps {
                if k % cfg.record_every == 0 {
                    out.x.push(x);
                    out.w.push(w);
                    out.lower.push(cum_l);
                    out.upper.push(cum_u);
                    out.turnover.push(acc);
                    acc = 0.0;
                }
                if k == n_steps {
                    break;
                }
                let z: f64 = rng.sample(StandardNormal);
                let v_max: f64 = rng.gen();
                let v_min: f64 = rng.gen();
                let dw = sign * sq * z;
                let y = x + delta * dw;
                // Extremes of the Brownian bridge from x to y over the step.
                let d = y - x;
                let m_hi = 0.5 * (x + y + (d * d - 2.0 * s * s * (1.0 - v_max).ln()).sqrt());
                let du = (m_hi - l).max(0.0);
                let dl = if du > 0.0 {
                    0.0
                } else {
                    let m_lo = 0.5 * (x + y - (d * d - 2.0 * s * s * (1.0 - v_min).ln()).sqrt());
                    (-l - m_lo).max(0.0)
                };
                x = (y - du + dl).clamp(-l, l);
                w += dw;
                cum_l += dl;
                cum_u += du;
                acc += dl + du;
                out.total += dl + du;
            }
            Ok(out)
        })
        .collect();
    gather(outs, PathKind::Reflected { band }, cfg, n_rec, delta)
}

/// Equilibrium state for proportional costs `lambda1` per share.
pub fn simulate_reflected(params: &ModelParams, lambda1: f64, cfg: &SimConfig) -> Result<PathSet> {
    let delta = params.nonzero_delta()?;
    let l = crate::equilibrium_ode::proportional_band(params, lambda1)?;
    let mut set = reflected_paths(l, params.x0(), delta, cfg)?;
    set.frictionless_position = params.frictionless_position();
    set.mu = equilibrium_returns(&set, params);
    Ok(set)
}

/// `mu_t = gamma_bar [s sigma^2 + sigma (beta1 + beta2) W_t] + (gamma1 - gamma2) sigma^2 / 2 X_t`.
pub fn equilibrium_returns(paths: &PathSet, params: &ModelParams) -> Vec<f64> {
    let slope_x = 0.5 * (params.gamma1 - params.gamma2) * params.sigma * params.sigma;
    frictionless_returns(paths, params)
        .into_iter()
        .zip(&paths.x)
        .map(|(m, x)| m + slope_x * x)
        .collect()
}

/// Frictionless expected return along the same Brownian path.
pub fn frictionless_returns(paths: &PathSet, params: &ModelParams) -> Vec<f64> {
    let gb = params.gamma_bar();
    let s2 = params.sigma * params.sigma;
    let base = gb * params.s * s2;
    let slope_w = gb * params.sigma * (params.beta1 + params.beta2);
    paths.w.iter().map(|w| base + slope_w * w).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnoverStats {
    /// Mean of `|d phi^1|` per day over recorded intervals.
    pub mean_daily: f64,
    /// Standard deviation of the per-interval daily rate.
    pub std_daily: f64,
    /// Autocorrelations at lags of 1..=n recorded intervals.
    pub autocorrelations: Vec<f64>,
    /// Mean daily turnover from full-resolution totals, with its Monte Carlo
    /// standard error across paths.
    pub mean_from_totals: f64,
    pub std_error: f64,
}

/// Turnover statistics across time and paths; the initial jump at `t = 0`
/// is excluded.
pub fn turnover_stats(paths: &PathSet, max_lag: usize) -> Result<TurnoverStats> {
    let n = paths.n_records();
    if paths.n_paths == 0 || n < 2 {
        return Err(Error::InsufficientData("turnover statistics need at least one interval".into()));
    }
    let dt_rec = paths.times[1] - paths.times[0];
    let series: Vec<&[f64]> = (0..paths.n_paths)
        .map(|p| &paths.turnover[p * n + 1..(p + 1) * n])
        .collect();
    let count = (paths.n_paths * (n - 1)) as f64;
    let mean_int = series.iter().flat_map(|s| s.iter()).sum::<f64>() / count;
    let var_int = series
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| (v - mean_int).powi(2))
        .sum::<f64>()
        / count;
    let mut ac = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        if lag >= n - 1 {
            break;
        }
        if var_int <= 1e-300 * mean_int.abs().max(1.0).powi(2) {
            ac.push(1.0);
            continue;
        }
        let mut num = 0.0;
        let mut m = 0usize;
        for s in &series {
            for t in lag..s.len() {
                num += (s[t] - mean_int) * (s[t - lag] - mean_int);
                m += 1;
            }
        }
        ac.push(num / m as f64 / var_int);
    }
    let per_path: Vec<f64> = paths.total_turnover.iter().map(|t| t / paths.horizon).collect();
    let k = per_path.len() as f64;
    let pm = per_path.iter().sum::<f64>() / k;
    let se = if per_path.len() > 1 {
        (per_path.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        f64::NAN
    };
    Ok(TurnoverStats {
        mean_daily: mean_int / dt_rec,
        std_daily: var_int.sqrt() / dt_rec,
        autocorrelations: ac,
        mean_from_totals: pm,
        std_error: se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Trapezoid integral of the density over the grid.
    pub mass: f64,
    /// Trapezoid variance over the grid.
    pub variance: f64,
    /// Variance from the canonical second moment, independent of the grid.
    pub analytic_variance: f64,
}

impl StationaryDensity {
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "nu"])?;
        for (x, v) in self.grid.iter().zip(&self.density) {
            wr.write_record(&[fmt_num(*x), fmt_num(*v)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Cumulative distribution at the grid nodes by trapezoid accumulation.
    pub fn cdf(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..self.grid.len() {
            acc += 0.5 * (self.grid[i] - self.grid[i - 1]) * (self.density[i] + self.density[i - 1]);
            out.push(acc);
        }
        out
    }
}

/// Canonical log-weight `Phi(u) = int_0^u |g~/q|^{1/(q-1)}` on the canonical
/// grid by cumulative trapezoid from the centre, together with the
/// normalizing constant `c~` and second moment `v~`.
pub(crate) struct CanonicalWeights {
    pub grid: Vec<f64>,
    pub phi: Vec<f64>,
    pub c_tilde: f64,
    pub v_tilde: f64,
    pub edge_weight: f64,
}

pub(crate) fn canonical_weights(canonical: &OdeSolution, q: f64) -> Result<CanonicalWeights> {
    let n = canonical.grid.len();
    if n < 3 {
        return Err(Error::Quadrature("canonical grid too short".into()));
    }
    let m = (n - 1) / 2;
    if canonical.grid[m] != 0.0 {
        return Err(Error::Quadrature("canonical grid must have 0 at its centre".into()));
    }
    let p = 1.0 / (q - 1.0);
    let integrand: Vec<f64> = canonical.g_values.iter().map(|g| (g / q).abs().powf(p)).collect();
    let mut phi = vec![0.0; n];
    for i in m + 1..n {
        let h = canonical.grid[i] - canonical.grid[i - 1];
        phi[i] = phi[i - 1] + 0.5 * h * (integrand[i] + integrand[i - 1]);
    }
    for i in (0..m).rev() {
        let h = canonical.grid[i + 1] - canonical.grid[i];
        phi[i] = phi[i + 1] + 0.5 * h * (integrand[i] + integrand[i + 1]);
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quadrature("non-finite canonical integrand".into()));
    }
    let mut z = 0.0;
    let mut x2 = 0.0;
    for i in m + 1..n {
        let h = canonical.grid[i] - canonical.grid[i - 1];
        let (a, b) = ((-phi[i - 1]).exp(), (-phi[i]).exp());
        z += 0.5 * h * (a + b);
        x2 += 0.5 * h * (canonical.grid[i - 1].powi(2) * a + canonical.grid[i].powi(2) * b);
    }
    let c_tilde = 1.0 / (2.0 * z);
    Ok(CanonicalWeights {
        grid: canonical.grid.clone(),
        c_tilde,
        v_tilde: 2.0 * c_tilde * x2,
        edge_weight: (-phi[n - 1]).exp(),
        phi,
    })
}

impl CanonicalWeights {
    fn phi_at(&self, u: f64) -> Option<f64> {
        let n = self.grid.len();
        let (lo, hi) = (self.grid[0], self.grid[n - 1]);
        if !(u >= lo && u <= hi) {
            return None;
        }
        let h = (hi - lo) / (n - 1) as f64;
        let t = (u - lo) / h;
        let i = (t.floor() as usize).min(n - 2);
        let w = t - i as f64;
        Some(self.phi[i] * (1.0 - w) + self.phi[i + 1] * w)
    }
}

/// Stationary density of the state for cost `lambda_q |x|^q / q`, from the
/// canonical solution and the argument scaling `u = c x`:
/// `nu(x) = c c~ exp(-Phi(c x))`.
pub fn stationary_density(
    canonical: &OdeSolution,
    q: f64,
    lambda_q: f64,
    params: &ModelParams,
    grid: &[f64],
) -> Result<StationaryDensity> {
    if !(q > 1.0 && q <= 2.0) {
        return Err(Error::InvalidParam(format!("q = {q} outside (1, 2]")));
    }
    let delta = params.nonzero_delta()?;
    let cw = canonical_weights(canonical, q)?;
    let (_, c) = rescale_constants(q, lambda_q, params.gamma_sigma2(), delta * delta);
    let mut density = Vec::with_capacity(grid.len());
    for &x in grid {
        let phi = cw.phi_at(c * x).ok_or_else(|| {
            Error::Quadrature(format!("x = {x:e} maps outside the canonical table"))
        })?;
        let v = c * cw.c_tilde * (-phi).exp();
        if !v.is_finite() {
            return Err(Error::Quadrature(format!("non-finite density at x = {x:e}")));
        }
        density.push(v);
    }
    let mut mass = 0.0;
    let mut second = 0.0;
    for i in 1..grid.len() {
        let h = grid[i] - grid[i - 1];
        mass += 0.5 * h * (density[i] + density[i - 1]);
        second += 0.5 * h * (grid[i].powi(2) * density[i] + grid[i - 1].powi(2) * density[i - 1]);
    }
    Ok(StationaryDensity {
        grid: grid.to_vec(),
        density,
        mass,
        variance: second,
        analytic_variance: cw.v_tilde / (c * c),
    })
}
