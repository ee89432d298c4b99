//! Long-run decoupling function `g` of the ergodic equilibrium ODE
//!
//! ```text
//! (delta^2 / 2) g'' + g' (G')^{-1}(g) = gamma sigma^2 x
//! ```
//!
//! The odd solution is found through the first-order reduction
//! `y' = -a x^2 + b + F(y)` on `[0, x_max]`, with `a = gamma sigma^2 / delta^2`
//! and `F = 2 G* / delta^2`. Each shot is integrated backward from the
//! supersolution `h = F^{-1}(a x^2 - b)` at `x_max`, where trajectories
//! contract, and the pasting constant `b_F` is the root of `b -> y(0; b)`,
//! which is strictly decreasing. Then `g(x) = -y(|x|; b_F) sign(x)`.
//!
//! Closed forms cover quadratic costs (`g` linear) and proportional costs
//! (cubic inside a no-trade band).

mod rk45;

use std::io::Write;

use serde::Serialize;

use crate::cost_model::{CostSpec, SmoothCost};
use crate::error::{Error, Result};
use rk45::{Flow, Rk45Options};

/// Agent and market primitives in absolute units (shares, currency, days).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub s: f64,
    pub phi1_init: f64,
}

impl ModelParams {
    pub fn new(
        gamma1: f64,
        gamma2: f64,
        sigma: f64,
        beta1: f64,
        beta2: f64,
        s: f64,
        phi1_init: f64,
    ) -> Result<Self> {
        let p = ModelParams { gamma1, gamma2, sigma, beta1, beta2, s, phi1_init };
        p.validate()?;
        Ok(p)
    }

    /// Agents start at their frictionless allocation `s gamma2 / (gamma1 + gamma2)`.
    pub fn at_frictionless_start(gamma1: f64, gamma2: f64, sigma: f64, beta1: f64, beta2: f64, s: f64) -> Result<Self> {
        let phi = s * gamma2 / (gamma1 + gamma2);
        Self::new(gamma1, gamma2, sigma, beta1, beta2, s, phi)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("s", self.s), ("phi1_init", self.phi1_init)] {
            if !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} = {v} must be finite")));
            }
        }
        Ok(())
    }

    pub fn gamma_bar(&self) -> f64 {
        self.gamma1 * self.gamma2 / (self.gamma1 + self.gamma2)
    }

    pub fn gamma_half(&self) -> f64 {
        0.5 * (self.gamma1 + self.gamma2)
    }

    pub fn delta(&self) -> f64 {
        (self.gamma1 * self.beta1 - self.gamma2 * self.beta2) / ((self.gamma1 + self.gamma2) * self.sigma)
    }

    /// `gamma sigma^2` with `gamma = (gamma1 + gamma2) / 2`.
    pub fn gamma_sigma2(&self) -> f64 {
        self.gamma_half() * self.sigma * self.sigma
    }

    pub fn frictionless_position(&self) -> f64 {
        self.s * self.gamma2 / (self.gamma1 + self.gamma2)
    }

    /// Initial deviation from the frictionless allocation.
    pub fn x0(&self) -> f64 {
        self.phi1_init - self.frictionless_position()
    }

    pub(crate) fn nonzero_delta(&self) -> Result<f64> {
        self.validate()?;
        let d = self.delta();
        if d == 0.0 || !d.is_finite() {
            Err(Error::DegenerateEndowment)
        } else {
            Ok(d)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeKind {
    Numeric,
    ClosedQuadratic,
    Proportional,
}

/// Tolerances for the shooting solver.
#[derive(Debug, Clone, Copy)]
pub struct ShootingOptions {
    /// Relative tolerance of the adaptive Runge-Kutta integration.
    pub rtol: f64,
    /// Target for `|y(0; b)|` in units of `g` at one natural length of the
    /// problem, the length that maps to `x = 1` in the canonical equation.
    pub tol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions { rtol: 1e-10, tol: 1e-9 }
    }
}

/// The reduced problem: diffusion `delta^2`, drift coefficient `gamma sigma^2`.
#[derive(Debug, Clone)]
struct Ergodic {
    cost: SmoothCost,
    delta2: f64,
    gs2: f64,
}

impl Ergodic {
    fn a(&self) -> f64 {
        self.gs2 / self.delta2
    }

    fn f(&self, y: f64) -> f64 {
        2.0 * self.cost.legendre(y) / self.delta2
    }

    fn f_inv(&self, v: f64) -> f64 {
        self.cost.legendre_inverse(0.5 * self.delta2 * v)
    }

    fn g_scale(&self, x_max: f64) -> f64 {
        self.cost.legendre_inverse(0.5 * self.gs2 * x_max * x_max)
    }

    fn anchor(&self, b: f64, x_max: f64) -> Result<f64> {
        let v = self.a() * x_max * x_max - b;
        if v < 0.0 {
            return Err(Error::Bracket(format!(
                "a x_max^2 - b = {v:e} < 0; the supersolution is undefined at x_max = {x_max:e}"
            )));
        }
        Ok(self.f_inv(v))
    }

    /// Backward shot from `x_max` to 0. Returns `None` when `y(0) < 0` is
    /// certain: once `y < 0` at some `x <= sqrt(b+/a)`, `y' >= 0` keeps it
    /// negative all the way to the origin. Blow-up toward `-inf` means the
    /// same thing.
    fn shoot(&self, b: f64, x_max: f64, nodes: &[f64], rtol: f64) -> Result<Option<Vec<f64>>> {
        let a = self.a();
        let y_end = self.anchor(b, x_max)?;
        let x_turn = (b.max(0.0) / a).sqrt();
        let scale = self.g_scale(x_max);
        let opts = Rk45Options { rtol, atol: rtol * 1e-3 * scale, max_steps: 2_000_000 };
        let rhs = |x: f64, y: f64| -a * x * x + b + self.f(y);
        let mut went_negative = false;
        let res = rk45::integrate(rhs, x_max, y_end, 0.0, nodes, opts, |x, y| {
            if y < 0.0 {
                went_negative = true;
                if x <= x_turn {
                    return Flow::Stop;
                }
            }
            Flow::Continue
        });
        match res {
            Ok(out) if out.stopped => Ok(None),
            Ok(out) => {
                if out.y_end < 0.0 {
                    Ok(None)
                } else {
                    Ok(Some(out.at_nodes))
                }
            }
            Err(_) if went_negative => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn y0(&self, b: f64, x_max: f64, rtol: f64) -> Result<Option<f64>> {
        Ok(self.shoot(b, x_max, &[0.0], rtol)?.map(|v| v[0]))
    }

    fn find_bf(&self, x_max: f64, opts: ShootingOptions) -> Result<f64> {
        let a = self.a();
        let tol = opts.tol * self.g_scale(natural_length(self));
        let b_cap = a * x_max * x_max;
        let mut lo = 0.0;
        let mut hi = a * (x_max / 6.0).powi(2);
        let mut doublings = 0;
        loop {
            match self.y0(hi, x_max, opts.rtol)? {
                None => break,
                Some(y) if y < 0.0 => break,
                Some(y) if y.abs() <= tol => return Ok(hi),
                Some(_) => {
                    lo = hi;
                    hi *= 2.0;
                    doublings += 1;
                    if doublings > 60 {
                        return Err(Error::NoRoot("bracket expansion exceeded 60 doublings".into()));
                    }
                    if hi > b_cap {
                        return Err(Error::NoRoot(format!(
                            "y(0; b) stays positive up to b = a x_max^2; x_max = {x_max:e} is too small"
                        )));
                    }
                }
            }
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 4.0 * f64::EPSILON * hi {
                return Ok(mid);
            }
            match self.y0(mid, x_max, opts.rtol)? {
                Some(y) if y.abs() <= tol => return Ok(mid),
                Some(y) if y > 0.0 => lo = mid,
                _ => hi = mid,
            }
        }
    }

    fn solve(&self, x_max: f64, grid_n: usize, opts: ShootingOptions) -> Result<Tabulated> {
        if grid_n < 3 || grid_n % 2 == 0 {
            return Err(Error::InvalidParam(format!("grid_n = {grid_n} must be odd and at least 3")));
        }
        if !(x_max > 0.0 && x_max.is_finite()) {
            return Err(Error::InvalidParam(format!("x_max = {x_max} must be positive")));
        }
        // The anchor at the shooting endpoint is only approximately on the
        // true solution; the error decays inward, so shoot from beyond the
        // output grid and keep the boundary layer out of the table.
        let x_shoot = SHOOT_EXTENSION * x_max;
        let b_f = self.find_bf(x_shoot, opts)?;
        let m = (grid_n - 1) / 2;
        let h = x_max / m as f64;
        let nodes: Vec<f64> = (0..=m).rev().map(|j| if j == m { x_max } else { j as f64 * h }).collect();
        let ys = self
            .shoot(b_f, x_shoot, &nodes, opts.rtol)?
            .ok_or_else(|| Error::Numeric("final shot at b_F turned negative".into()))?;
        // ys[k] is y at nodes[k] = (m - k) h; mirror into an odd table.
        let a = self.a();
        let mut grid = Vec::with_capacity(grid_n);
        let mut g = Vec::with_capacity(grid_n);
        for i in 0..grid_n {
            let j = i as isize - m as isize;
            let x = if j == m as isize { x_max } else if -j == m as isize { -x_max } else { j as f64 * h };
            let y = ys[m - j.unsigned_abs()];
            let gv = if j == 0 { 0.0 } else { -y * (j.signum() as f64) };
            grid.push(x);
            g.push(gv);
        }
        let gp: Vec<f64> = grid
            .iter()
            .zip(&g)
            .map(|(&x, &gv)| a * x * x - b_f - self.f(gv))
            .collect();
        let growth = g[grid_n - 1].abs() / self.g_scale(x_max);
        Ok(Tabulated { grid, g, gp, b_f, growth })
    }
}

/// Ratio of the shooting endpoint to the output half-width.
pub const SHOOT_EXTENSION: f64 = 1.25;

struct Tabulated {
    grid: Vec<f64>,
    g: Vec<f64>,
    gp: Vec<f64>,
    b_f: f64,
    growth: f64,
}

/// Decoupling function on a uniform symmetric grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub grid: Vec<f64>,
    pub g_values: Vec<f64>,
    pub g_prime_values: Vec<f64>,
    pub b_f: f64,
    pub a: f64,
    pub growth_ratio_at_xmax: f64,
    pub kind: OdeKind,
    /// Cost the solution was computed for (proportional for the band case).
    pub cost: CostSpec,
    /// Signed diffusion coefficient of the state.
    pub delta: f64,
    /// `gamma sigma^2`.
    pub gamma_sigma2: f64,
    /// Half-width `l` of the no-trade band for proportional costs.
    pub band: Option<f64>,
    pub warnings: Vec<String>,
    smooth: Option<SmoothCost>,
}

/// Long-run moments of the state under the speed measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryLaw {
    pub variance: f64,
    pub std: f64,
    /// Mean of `|d phi^1| / dt` for one agent.
    pub mean_turnover: f64,
    /// Unnormalized density at the grid edge relative to the centre.
    pub edge_density_ratio: f64,
}

impl OdeSolution {
    pub fn x_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn spacing(&self) -> f64 {
        (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let n = self.grid.len();
        let x_max = self.x_max();
        if !(x.abs() <= x_max) {
            return None;
        }
        let u = (x - self.grid[0]) / self.spacing();
        let i = (u.floor() as usize).min(n - 2);
        Some((i, (u - i as f64).clamp(0.0, 1.0)))
    }

    /// Linear interpolation of `g`; `None` outside the grid.
    pub fn g_at(&self, x: f64) -> Option<f64> {
        self.locate(x).map(|(i, w)| self.g_values[i] * (1.0 - w) + self.g_values[i + 1] * w)
    }

    pub fn g_prime_at(&self, x: f64) -> Option<f64> {
        self.locate(x)
            .map(|(i, w)| self.g_prime_values[i] * (1.0 - w) + self.g_prime_values[i + 1] * w)
    }

    /// The smooth cost, if any.
    pub fn smooth_cost(&self) -> Option<&SmoothCost> {
        self.smooth.as_ref()
    }

    /// Long-run trading rate `(G')^{-1}(g(x))` of agent 1.
    pub fn rate_at(&self, x: f64) -> Option<f64> {
        let c = self.smooth.as_ref()?;
        self.g_at(x).map(|g| c.g_prime_inverse(g))
    }

    /// Trading rate at each grid node; zeros for proportional costs, whose
    /// strategy is singular.
    pub fn trading_rates(&self) -> Vec<f64> {
        match &self.smooth {
            Some(c) => self.g_values.iter().map(|&g| c.g_prime_inverse(g)).collect(),
            None => vec![0.0; self.grid.len()],
        }
    }

    /// Stationary variance and turnover of the state process.
    pub fn stationary_law(&self) -> Result<StationaryLaw> {
        if let Some(l) = self.band {
            let var = l * l / 3.0;
            return Ok(StationaryLaw {
                variance: var,
                std: var.sqrt(),
                mean_turnover: self.delta * self.delta / (2.0 * l),
                edge_density_ratio: 1.0,
            });
        }
        let rates = self.trading_rates();
        let n = self.grid.len();
        let m = (n - 1) / 2;
        let h = self.spacing();
        let d2 = self.delta * self.delta;
        // log density psi(x) = (2 / delta^2) int_0^x rate, accumulated outward.
        let mut psi = vec![0.0; n];
        for i in (m + 1)..n {
            psi[i] = psi[i - 1] + h * (rates[i] + rates[i - 1]) / d2;
        }
        for i in (0..m).rev() {
            psi[i] = psi[i + 1] - h * (rates[i] + rates[i + 1]) / d2;
        }
        let w: Vec<f64> = psi.iter().map(|p| p.exp()).collect();
        let trap = |f: &dyn Fn(usize) -> f64| -> f64 {
            let mut s = 0.0;
            for i in 0..n - 1 {
                s += 0.5 * h * (f(i) + f(i + 1));
            }
            s
        };
        let z = trap(&|i| w[i]);
        let var = trap(&|i| self.grid[i] * self.grid[i] * w[i]) / z;
        let turn = trap(&|i| rates[i].abs() * w[i]) / z;
        if !(z.is_finite() && var.is_finite() && turn.is_finite()) {
            return Err(Error::Quadrature("non-finite speed-measure integral".into()));
        }
        Ok(StationaryLaw {
            variance: var,
            std: var.sqrt(),
            mean_turnover: turn,
            edge_density_ratio: w[n - 1].max(w[0]),
        })
    }

    /// Scaled residual of the second-order ODE on the interior grid,
    /// `max |(delta^2/2) g'' + g' (G')^{-1}(g) - gamma sigma^2 x| / (gamma sigma^2 x_max)`,
    /// with `g''` from central differences of the tabulated `g'`. For
    /// proportional costs the check runs inside the band where no trading
    /// occurs.
    pub fn ode_residual(&self) -> f64 {
        let n = self.grid.len();
        let h = self.spacing();
        let scale = self.gamma_sigma2 * self.x_max();
        let d2 = self.delta * self.delta;
        let mut worst = 0.0f64;
        for i in 1..n - 1 {
            let x = self.grid[i];
            let gpp = (self.g_prime_values[i + 1] - self.g_prime_values[i - 1]) / (2.0 * h);
            let drift = match (&self.smooth, self.band) {
                (Some(c), _) => self.g_prime_values[i] * c.g_prime_inverse(self.g_values[i]),
                (None, Some(l)) => {
                    if x.abs() + h >= l {
                        continue;
                    }
                    0.0
                }
                (None, None) => 0.0,
            };
            let r = 0.5 * d2 * gpp + drift - self.gamma_sigma2 * x;
            worst = worst.max(r.abs() / scale);
        }
        worst
    }

    /// Checks the structural properties every solution must have: oddness,
    /// `x g(x) <= 0`, and monotone non-increasing `g`.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.grid.len();
        let g_sup = self.g_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let (x, g) = (self.grid[i], self.g_values[i]);
            if (g + self.g_values[n - 1 - i]).abs() > 1e-8 * g_sup {
                return Err(Error::Numeric(format!("g is not odd at x = {x:e}")));
            }
            if x * g > 0.0 {
                return Err(Error::Numeric(format!("x g(x) > 0 at x = {x:e}")));
            }
        }
        if self.g_values.windows(2).any(|w| w[1] > w[0] + 1e-12 * g_sup) {
            return Err(Error::Numeric("g is not non-increasing".into()));
        }
        Ok(())
    }

    /// Writes `x,g,g_prime,trading_rate`, preceded by an optional comment line.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "g", "g_prime", "trading_rate"])?;
        let rates = self.trading_rates();
        for i in 0..self.grid.len() {
            wr.write_record(&[
                fmt_num(self.grid[i]),
                fmt_num(self.g_values[i]),
                fmt_num(self.g_prime_values[i]),
                fmt_num(rates[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.12e}")
}

fn ergodic(spec: &CostSpec, params: &ModelParams, op: &'static str) -> Result<Ergodic> {
    let cost = spec.smooth(op)?;
    let delta = params.nonzero_delta()?;
    Ok(Ergodic { cost, delta2: delta * delta, gs2: params.gamma_sigma2() })
}

fn canonical_problem(q: f64) -> Result<Ergodic> {
    let cost = CostSpec::power(q, q)?.smooth("solve_canonical")?;
    Ok(Ergodic { cost, delta2: 2.0, gs2: 2.0 })
}

/// One backward-integrated solution of the first-order equation.
#[derive(Debug, Clone)]
pub struct FirstOrderPath {
    /// Ascending abscissae on `[0, x_max]` (accepted steps plus any nodes).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FirstOrderPath {
    pub fn y0(&self) -> f64 {
        self.y[0]
    }
    pub fn y_end(&self) -> f64 {
        *self.y.last().unwrap()
    }
}

/// Backward integration of `y' = -a x^2 + b + F(y)` from the supersolution
/// at `x_max` down to 0.
pub fn solve_first_order(spec: &CostSpec, params: &ModelParams, b: f64, x_max: f64) -> Result<FirstOrderPath> {
    let e = ergodic(spec, params, "solve_first_order")?;
    first_order(&e, b, x_max, ShootingOptions::default().rtol)
}

fn first_order(e: &Ergodic, b: f64, x_max: f64, rtol: f64) -> Result<FirstOrderPath> {
    let a = e.a();
    let y_end = e.anchor(b, x_max)?;
    if x_max <= 4.0 * (b.max(0.0) / a).sqrt() {
        return Err(Error::InvalidParam(format!(
            "x_max = {x_max:e} must exceed 4 sqrt(b/a) = {:e}",
            4.0 * (b.max(0.0) / a).sqrt()
        )));
    }
    let scale = e.g_scale(x_max);
    let opts = Rk45Options { rtol, atol: rtol * 1e-3 * scale, max_steps: 2_000_000 };
    let mut xs = vec![x_max];
    let mut ys = vec![y_end];
    rk45::integrate(|x, y| -a * x * x + b + e.f(y), x_max, y_end, 0.0, &[], opts, |x, y| {
        xs.push(x);
        ys.push(y);
        Flow::Continue
    })?;
    xs.reverse();
    ys.reverse();
    Ok(FirstOrderPath { x: xs, y: ys })
}

/// Pasting constant `b_F` by bisection on the strictly decreasing map `b -> y(0; b)`.
pub fn find_bf(spec: &CostSpec, params: &ModelParams, x_max: f64, tol: f64) -> Result<f64> {
    let opts = ShootingOptions { tol, ..Default::default() };
    find_bf_with(spec, params, x_max, opts)
}

pub fn find_bf_with(spec: &CostSpec, params: &ModelParams, x_max: f64, opts: ShootingOptions) -> Result<f64> {
    ergodic(spec, params, "find_bF")?.find_bf(x_max, opts)
}

/// `y(0; b)` for a given `b`, or `None` when the shot is certainly negative.
pub fn shoot_y0(spec: &CostSpec, params: &ModelParams, b: f64, x_max: f64) -> Result<Option<f64>> {
    ergodic(spec, params, "shoot")?.y0(b, x_max, ShootingOptions::default().rtol)
}

pub fn solve_g(spec: &CostSpec, params: &ModelParams, x_max: f64, grid_n: usize) -> Result<OdeSolution> {
    solve_g_with(spec, params, x_max, grid_n, ShootingOptions::default())
}

pub fn solve_g_with(
    spec: &CostSpec,
    params: &ModelParams,
    x_max: f64,
    grid_n: usize,
    opts: ShootingOptions,
) -> Result<OdeSolution> {
    let e = ergodic(spec, params, "solve_g")?;
    let t = e.solve(x_max, grid_n, opts)?;
    Ok(assemble(t, &e, spec.clone(), params.delta(), OdeKind::Numeric))
}

fn assemble(t: Tabulated, e: &Ergodic, cost: CostSpec, delta: f64, kind: OdeKind) -> OdeSolution {
    let mut warnings = Vec::new();
    if !(0.9..=1.1).contains(&t.growth) {
        warnings.push(format!(
            "growth ratio {:.4} at x_max outside [0.9, 1.1]; x_max is too small",
            t.growth
        ));
    }
    OdeSolution {
        grid: t.grid,
        g_values: t.g,
        g_prime_values: t.gp,
        b_f: t.b_f,
        a: e.a(),
        growth_ratio_at_xmax: t.growth,
        kind,
        cost,
        delta,
        gamma_sigma2: e.gs2,
        band: None,
        warnings,
        smooth: Some(e.cost.clone()),
    }
}

/// Default node count. The residual check differentiates tabulated `g'`
/// numerically, and its O(h^2) error stays below 1e-6 (scaled) from here on.
pub const DEFAULT_GRID_N: usize = 16001;

/// Number of stationary standard deviations covered by the default grid.
pub const DEFAULT_STD_MULTIPLE: f64 = 12.0;

/// Solves with `x_max` set to twelve stationary standard deviations of the
/// state, found by re-solving until the grid and the computed law agree.
pub fn solve_g_auto(spec: &CostSpec, params: &ModelParams, grid_n: usize) -> Result<OdeSolution> {
    let e = ergodic(spec, params, "solve_g")?;
    let mut x_max = natural_length(&e) * DEFAULT_STD_MULTIPLE;
    for _ in 0..40 {
        let t = e.solve(x_max, grid_n, ShootingOptions::default())?;
        let sol = assemble(t, &e, spec.clone(), params.delta(), OdeKind::Numeric);
        let std = sol.stationary_law()?.std;
        let target = DEFAULT_STD_MULTIPLE * std;
        if (target - x_max).abs() <= 0.02 * x_max {
            return Ok(sol);
        }
        x_max = target;
    }
    Err(Error::Numeric("x_max iteration for the default grid did not settle".into()))
}

/// Length scale of the rescaling that maps the ODE to its canonical form,
/// using the lowest-elasticity term for composite costs. Stationary spreads
/// are of this order.
fn natural_length(e: &Ergodic) -> f64 {
    let t = e
        .cost
        .terms()
        .iter()
        .min_by(|a, b| a.q.partial_cmp(&b.q).unwrap())
        .copied()
        .unwrap();
    1.0 / rescale_constants(t.q, t.lambda, e.gs2, e.delta2).1
}

/// `(A, c)` with `g(x) = A g~(c x)` for cost `lambda |x|^q / q`.
pub fn rescale_constants(q: f64, lambda: f64, gs2: f64, delta2: f64) -> (f64, f64) {
    let c = (2f64.powf(q - 1.0) * q * gs2 / (lambda * delta2.powf(q))).powf(1.0 / (q + 2.0));
    let a = gs2 / (delta2 * c * c * c);
    (a, c)
}

/// Closed-form linear solution for quadratic costs `lambda x^2 / 2`.
pub fn quadratic_g(params: &ModelParams, lambda: f64, x_max: f64, grid_n: usize) -> Result<OdeSolution> {
    let spec = CostSpec::power(2.0, lambda)?;
    let e = ergodic(&spec, params, "quadratic_g")?;
    if grid_n < 3 || grid_n % 2 == 0 {
        return Err(Error::InvalidParam(format!("grid_n = {grid_n} must be odd and at least 3")));
    }
    let k = (e.gs2 * lambda).sqrt();
    let grid = uniform_grid(x_max, grid_n);
    let g: Vec<f64> = grid.iter().map(|x| -k * x).collect();
    let t = Tabulated {
        growth: g[grid_n - 1].abs() / e.g_scale(x_max),
        gp: vec![-k; grid_n],
        g,
        grid,
        b_f: k,
    };
    Ok(assemble(t, &e, spec, params.delta(), OdeKind::ClosedQuadratic))
}

pub(crate) fn uniform_grid(x_max: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) / 2;
    (0..n)
        .map(|i| {
            let j = i as isize - m as isize;
            if j == m as isize {
                x_max
            } else if -j == m as isize {
                -x_max
            } else {
                x_max * j as f64 / m as f64
            }
        })
        .collect()
}

/// Parameter-free equation `g'' + g' sign(g) |g/q|^{1/(q-1)} = 2x`, solved
/// as the general one with `G = |x|^q`, `delta^2 = 2` and `gamma sigma^2 = 2`.
pub fn solve_canonical(q: f64, x_max: f64, grid_n: usize) -> Result<OdeSolution> {
    let e = canonical_problem(q)?;
    let t = e.solve(x_max, grid_n, ShootingOptions::default())?;
    let cost = CostSpec::power(q, q)?;
    Ok(assemble(t, &e, cost, 2f64.sqrt(), OdeKind::Numeric))
}

/// Maps a canonical solution to the decoupling function for cost
/// `lambda_q |x|^q / q` and the given agents: `g(x) = A g~(c x)`.
pub fn rescale_to_g(canonical: &OdeSolution, q: f64, lambda_q: f64, params: &ModelParams) -> Result<OdeSolution> {
    match canonical.cost.single_power() {
        Some((qc, lc)) if qc == q && lc == q && canonical.gamma_sigma2 == 2.0 => {}
        _ => {
            return Err(Error::InvalidParam(format!(
                "solution is not the canonical one for q = {q}"
            )))
        }
    }
    let spec = CostSpec::power(q, lambda_q)?;
    let e = ergodic(&spec, params, "rescale_to_g")?;
    let (a_val, c) = rescale_constants(q, lambda_q, e.gs2, e.delta2);
    let grid: Vec<f64> = canonical.grid.iter().map(|u| u / c).collect();
    let spacing = (grid[1] - grid[0]).abs();
    if !(spacing > f64::MIN_POSITIVE && grid.iter().all(|v| v.is_finite())) {
        return Err(Error::Resolution(format!("argument scale c = {c:e} collapses the grid")));
    }
    let g: Vec<f64> = canonical.g_values.iter().map(|v| a_val * v).collect();
    let gp: Vec<f64> = canonical.g_prime_values.iter().map(|v| a_val * c * v).collect();
    let x_max = *grid.last().unwrap();
    let t = Tabulated {
        growth: g[g.len() - 1].abs() / e.g_scale(x_max),
        grid,
        g,
        gp,
        b_f: a_val * c * canonical.b_f,
    };
    Ok(assemble(t, &e, spec, params.delta(), OdeKind::Numeric))
}

/// No-trade band half-width for proportional cost `lambda1` per share.
pub fn proportional_band(params: &ModelParams, lambda1: f64) -> Result<f64> {
    let delta = params.nonzero_delta()?;
    if !(lambda1 > 0.0 && lambda1.is_finite()) {
        return Err(Error::InvalidParam(format!("lambda1 = {lambda1} must be positive")));
    }
    Ok((1.5 * lambda1 * delta * delta / params.gamma_sigma2()).cbrt())
}

/// Piecewise cubic/constant `g` for proportional costs on `[-1.5 l, 1.5 l]`.
pub fn proportional_g(params: &ModelParams, lambda1: f64) -> Result<(OdeSolution, f64)> {
    let l = proportional_band(params, lambda1)?;
    Ok((proportional_g_on(params, lambda1, 1.5 * l, 3001)?, l))
}

pub fn proportional_g_on(params: &ModelParams, lambda1: f64, x_max: f64, grid_n: usize) -> Result<OdeSolution> {
    let l = proportional_band(params, lambda1)?;
    if grid_n < 3 || grid_n % 2 == 0 {
        return Err(Error::InvalidParam(format!("grid_n = {grid_n} must be odd and at least 3")));
    }
    let delta = params.delta();
    let gs2 = params.gamma_sigma2();
    let k = gs2 / (delta * delta);
    let grid = uniform_grid(x_max, grid_n);
    let mut g = Vec::with_capacity(grid_n);
    let mut gp = Vec::with_capacity(grid_n);
    for &x in &grid {
        if x.abs() <= l {
            g.push(k / 3.0 * (x * x * x - 3.0 * l * l * x));
            gp.push(k * (x * x - l * l));
        } else {
            g.push(-lambda1 * x.signum());
            gp.push(0.0);
        }
    }
    // Properties at the band edge: g'(l) = 0 and g(l) = -lambda1.
    let g_l = k / 3.0 * (l * l * l - 3.0 * l * l * l);
    if (g_l + lambda1).abs() > 1e-10 * lambda1 {
        return Err(Error::Numeric(format!("band edge value {g_l:e} differs from -lambda1")));
    }
    Ok(OdeSolution {
        grid,
        g_values: g,
        g_prime_values: gp,
        b_f: k * l * l,
        a: k,
        growth_ratio_at_xmax: 1.0,
        kind: OdeKind::Proportional,
        cost: CostSpec::proportional(lambda1)?,
        delta,
        gamma_sigma2: gs2,
        band: Some(l),
        warnings: Vec::new(),
        smooth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Calibrated-scale parameters for the quadratic case.
    fn params() -> ModelParams {
        let g1 = 1.25e-13;
        let g2 = 2.5e-13;
        let b = 2.19e10;
        ModelParams::at_frictionless_start(g1, g2, 1.88, b, -b, 2.46e11).unwrap()
    }

    #[test]
    fn derived_constants() {
        let p = params();
        assert!(((p.gamma1 + p.gamma2) - 3.75e-13).abs() < 1e-25);
        assert!((p.delta() - 2.19e10 / 1.88).abs() < 1.0);
        assert!((p.gamma_bar() - 1.25e-13 * 2.5e-13 / 3.75e-13).abs() < 1e-27);
    }

    #[test]
    fn delta_zero_rejected() {
        let p = ModelParams::at_frictionless_start(1e-13, 1e-13, 1.88, 1e10, 1e10, 1e11).unwrap();
        let spec = CostSpec::power(2.0, 1e-10).unwrap();
        assert_eq!(solve_g(&spec, &p, 1e11, 101).unwrap_err(), Error::DegenerateEndowment);
    }

    #[test]
    fn quadratic_first_order_root() {
        let p = params();
        let lam = 1.08e-10;
        let spec = CostSpec::power(2.0, lam).unwrap();
        let k = (p.gamma_sigma2() * lam).sqrt();
        assert!((k - 8.46e-12).abs() < 0.01e-12, "{k:e}");
        let x_max = 3.5e11;
        let path = solve_first_order(&spec, &p, k, x_max).unwrap();
        // Units: y scales like g, i.e. k x; compare against k x_max.
        assert!(path.y0().abs() < 1e-6 * k * x_max, "{:e}", path.y0());
        let path0 = solve_first_order(&spec, &p, 0.0, x_max).unwrap();
        assert!(path0.y0() > 0.0);
        let e = ergodic(&spec, &p, "t").unwrap();
        assert_eq!(path.y_end(), e.f_inv(e.a() * x_max * x_max - k));
    }

    #[test]
    fn bracket_error_when_b_too_large() {
        let p = params();
        let spec = CostSpec::power(2.0, 1e-10).unwrap();
        let err = solve_first_order(&spec, &p, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Bracket(_)));
    }

    #[test]
    fn bf_quadratic_and_monotone_in_lambda() {
        let p = params();
        let x_max = 3.5e11;
        let b1 = find_bf(&CostSpec::power(2.0, 1.08e-10).unwrap(), &p, x_max, 1e-9).unwrap();
        let k = (p.gamma_sigma2() * 1.08e-10).sqrt();
        assert!((b1 - k).abs() < 1e-8 * k, "{b1:e} {k:e}");
        let b2 = find_bf(&CostSpec::power(2.0, 2.16e-10).unwrap(), &p, x_max, 1e-9).unwrap();
        assert!(b2 > b1);
        let spec = CostSpec::power(2.0, 1.08e-10).unwrap();
        let y = shoot_y0(&spec, &p, 0.9 * b1, x_max).unwrap().unwrap();
        assert!(y > 0.0);
    }

    #[test]
    fn canonical_quadratic_is_linear() {
        let c = solve_canonical(2.0, 12.0, 2401).unwrap();
        for (x, g) in c.grid.iter().zip(&c.g_values) {
            assert!((g + 2.0 * x).abs() < 1e-8, "{x} {g}");
        }
        assert_eq!(c.g_values[1200], 0.0);
        assert!((c.b_f - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rescale_constants_match_explicit_formula() {
        // Independent form of the amplitude: (lambda/q)^{3/(q+2)} (gs2 delta^4 / 8)^{(q-1)/(q+2)}.
        for &(q, lam, gs2, d2) in &[(1.5, 5.2e-6, 6.6e-13, 1.5e20), (1.125, 0.019, 6.6e-13, 1.9e20), (2.0, 1e-10, 3.3e-13, 1.4e20)] {
            let (a, c) = rescale_constants(q, lam, gs2, d2);
            let q: f64 = q;
            let a_ref = (lam / q).powf(3.0 / (q + 2.0)) * (gs2 * d2 * d2 / 8.0).powf((q - 1.0) / (q + 2.0));
            let c_ref = 2f64.powf((q - 1.0) / (q + 2.0)) * (q * gs2 / lam).powf(1.0 / (q + 2.0)) * d2.powf(-q / (q + 2.0));
            assert!((a / a_ref - 1.0).abs() < 1e-12, "{q}: {a:e} {a_ref:e}");
            assert!((c / c_ref - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn proportional_identities() {
        let g1 = 1.25e-13;
        let g2 = 2.5e-13;
        let b = 2.57e10;
        let p = ModelParams::at_frictionless_start(g1, g2, 1.88, b, -b, 2.46e11).unwrap();
        let (sol, l) = proportional_g(&p, 0.31).unwrap();
        assert!((l / 5.08e10 - 1.0).abs() < 0.01, "{l:e}");
        assert_eq!(sol.g_at(0.0).unwrap(), 0.0);
        let k = sol.a;
        assert!((k * (l * l - l * l)).abs() == 0.0);
        assert!(sol.ode_residual() < 1e-9);
        sol.check_shape().unwrap();
        let law = sol.stationary_law().unwrap();
        assert!((law.std - l / 3f64.sqrt()).abs() < 1e-6 * l);
    }

    #[test]
    fn auto_grid_growth_ratio_in_band() {
        let p = params();
        let spec = CostSpec::power(1.5, 5.22e-6).unwrap();
        let sol = solve_g_auto(&spec, &p, 2001).unwrap();
        assert!((0.9..=1.1).contains(&sol.growth_ratio_at_xmax), "{}", sol.growth_ratio_at_xmax);
        sol.check_shape().unwrap();
    }
}
