//! Simulation-based deep solver for the finite-horizon equilibrium FBSDE.
//!
//! Each time step carries a small network mapping the forward variables
//! `(W_t, phi1_t)` to the martingale integrand `Z` and, when the price
//! volatility is endogenous, to `sigma`. The Euler rollout starts from two
//! learned scalars (`Y_0` and `S_0`) and training minimizes the mismatch of
//! the terminal conditions `Y_T = 0` and `S_T = b T + a W_T`.
//!
//! Everything is solved in order-one internal units: positions in
//! stationary standard deviations of the long-run state, trading rates in
//! units of mean turnover, marginal costs in units of `G'` at that rate and
//! price corrections in units of the terminal volatility `a`. The map is
//! recorded in [`Scaling`].

pub mod adam;
pub mod net;
mod rollout;

use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{CostSpec, SmoothCost};
use crate::equilibrium_ode::{fmt_num, solve_g_auto, ModelParams};
use crate::error::{Error, Result};
use adam::Adam;
use net::{Mode, NetShape};

pub use rollout::{backprop, loss, rollout, LossParts, RolloutBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolMode {
    /// Fixed price volatility; the state `X` and `Y` form an autonomous pair.
    ExogenousVol,
    /// Volatility and initial price are solved jointly with `Y`.
    EndogenousVol,
}

/// Terminal dividend `b T + a W_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dividend {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbsdeConfig {
    pub mode: VolMode,
    /// Horizon in days.
    pub horizon: f64,
    pub n_steps: usize,
    pub spec: CostSpec,
    pub params: ModelParams,
    pub dividend: Dividend,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_iterations: usize,
    pub seed: u64,
    pub shape: NetShape,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every` iterations.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Per-block gradient norm cap in internal units.
    pub clip_norm: f64,
    /// `sigma = a (1 + sigma_head_scale * head)`.
    pub sigma_head_scale: f64,
    /// Saturation of the scaled trading rate. The explicit forward system
    /// blows up in finite time for superlinear `(G')^{-1}` from a poor
    /// initial guess; the cap keeps those paths finite and never binds near
    /// a trained solution.
    pub rate_cap: f64,
}

impl FbsdeConfig {
    pub fn new(mode: VolMode, spec: CostSpec, params: ModelParams, dividend: Dividend) -> Self {
        FbsdeConfig {
            mode,
            horizon: 20.0,
            n_steps: 40,
            spec,
            params,
            dividend,
            batch_size: 128,
            learning_rate: 2e-3,
            n_iterations: 8000,
            seed: 0,
            shape: NetShape::default(),
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            lr_decay_every: 2000,
            lr_decay: 0.5,
            clip_norm: 10.0,
            sigma_head_scale: 0.1,
            rate_cap: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.into()));
        if self.n_steps < 2 {
            return bad("fbsde n_steps must be at least 2");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("fbsde horizon must be positive");
        }
        if self.mode == VolMode::EndogenousVol && !(self.dividend.a > 0.0) {
            return bad("terminal volatility a must be positive in endogenous mode");
        }
        if self.batch_size < 2 && self.shape.batch_norm {
            return Err(Error::BatchNorm);
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("learning-rate schedule must be non-negative with a positive decay");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in [0, 1) and eps must be positive");
        }
        if !(self.rate_cap > 0.0) {
            return bad("rate cap must be positive");
        }
        if self.shape.n1 == 0 || self.shape.n2 == 0 {
            return bad("hidden widths must be positive");
        }
        self.spec.smooth("deep_fbsde")?;
        self.params.validate()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Volatility the scaling and the exogenous dynamics use: the fixed
    /// `sigma` in exogenous mode, the terminal `a` in endogenous mode.
    pub fn sigma(&self) -> f64 {
        match self.mode {
            VolMode::ExogenousVol => self.params.sigma,
            VolMode::EndogenousVol => self.dividend.a,
        }
    }

    pub fn model(&self) -> ModelParams {
        ModelParams { sigma: self.sigma(), ..self.params }
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }

    /// Step index `t_index` with `horizon - t = days_to_maturity`.
    pub fn step_at_days_to_maturity(&self, days: f64) -> Result<usize> {
        let k = (self.horizon - days) / self.dt();
        let kr = k.round();
        if (k - kr).abs() > 1e-9 || kr < 0.0 || kr > self.n_steps as f64 {
            return Err(Error::InvalidParam(format!("{days} days to maturity is not a grid time")));
        }
        Ok(kr as usize)
    }
}

/// Internal units. Positions are divided by `x_unit`, rates by `rate_unit`,
/// marginal costs by `y_unit` and price corrections by `vol_unit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scaling {
    pub x_unit: f64,
    pub rate_unit: f64,
    pub y_unit: f64,
    pub vol_unit: f64,
}

impl Scaling {
    /// Units from the long-run equilibrium with the same cost and agents:
    /// stationary std of the state and mean turnover.
    pub fn compute(cfg: &FbsdeConfig) -> Result<Scaling> {
        let model = cfg.model();
        let sol = solve_g_auto(&cfg.spec, &model, 4001)?;
        let law = sol.stationary_law()?;
        let cost = cfg.spec.smooth("deep_fbsde")?;
        Ok(Scaling {
            x_unit: law.std,
            rate_unit: law.mean_turnover,
            y_unit: cost.g_prime(law.mean_turnover),
            vol_unit: cfg.sigma(),
        })
    }
}

/// Coefficients of the scaled Euler system.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub dt: f64,
    pub bn_eps: f64,
    /// Initial scaled state.
    pub state0: f64,
    /// `rate_unit / x_unit`.
    pub rho: f64,
    /// Scaled noise loading of `X`.
    pub d_hat: f64,
    /// Scaled mean-reversion coefficient of `Y`.
    pub c_hat: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub eps_sigma: f64,
    pub rate_cap: f64,
    cost: SmoothCost,
    y_unit: f64,
    rate_unit: f64,
}

impl Coeffs {
    pub fn new(cfg: &FbsdeConfig, sc: &Scaling) -> Result<Coeffs> {
        let m = cfg.model();
        let (g1, g2) = (m.gamma1, m.gamma2);
        let (b1, b2) = (m.beta1, m.beta2);
        let sig = m.sigma;
        let a = cfg.dividend.a;
        let phi_c = m.s * g2 / (g1 + g2);
        let state0 = match cfg.mode {
            VolMode::ExogenousVol => m.x0() / sc.x_unit,
            VolMode::EndogenousVol => (m.phi1_init - phi_c) / sc.x_unit,
        };
        Ok(Coeffs {
            dt: cfg.dt(),
            bn_eps: cfg.bn_eps,
            state0,
            rho: sc.rate_unit / sc.x_unit,
            d_hat: m.delta() / sc.x_unit,
            c_hat: 0.5 * (g1 + g2) * sig * sig * sc.x_unit / sc.y_unit,
            k0: m.s * m.gamma_bar() * a,
            k1: 0.5 * a * a * (g1 + g2) * sc.x_unit / sc.y_unit,
            k2: 0.5 * a * (g1 * b1 - g2 * b2) / sc.y_unit,
            k3: 0.5 * a * (g1 - g2) * sc.x_unit,
            k4: 0.5 * (g1 * b1 + g2 * b2),
            eps_sigma: cfg.sigma_head_scale,
            rate_cap: cfg.rate_cap,
            cost: cfg.spec.smooth("deep_fbsde")?,
            y_unit: sc.y_unit,
            rate_unit: sc.rate_unit,
        })
    }

    /// Scaled trading rate `(G')^{-1}(y_unit y) / rate_unit`, saturated at
    /// `rate_cap`.
    pub fn rate(&self, y: f64) -> f64 {
        (self.cost.g_prime_inverse(self.y_unit * y) / self.rate_unit).clamp(-self.rate_cap, self.rate_cap)
    }

    /// Derivative of [`Coeffs::rate`]: `y_unit / (rate_unit G''(rate))`,
    /// which is zero at the origin when every elasticity is below two.
    pub fn rate_prime(&self, y: f64) -> f64 {
        let r = self.cost.g_prime_inverse(self.y_unit * y);
        let g2 = self.cost.g_second(r);
        if g2.is_infinite() || (r / self.rate_unit).abs() > self.rate_cap {
            0.0
        } else {
            self.y_unit / (self.rate_unit * g2)
        }
    }

    pub fn unscale_rate(&self, r: f64) -> f64 {
        r * self.rate_unit
    }
}

/// All trainable parameters in one flat vector:
/// `[theta_Y, theta_S, Z heads 0..n, sigma heads 0..n]`, plus batch-norm
/// running statistics per head. The sigma heads exist only in
/// endogenous mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub shape: NetShape,
    pub n_steps: usize,
    pub mode: VolMode,
    pub params: Vec<f64>,
    pub running: Vec<Vec<f64>>,
}

impl NetworkParams {
    pub const THETA_Y: usize = 0;
    pub const THETA_S: usize = 1;
    const HEADS: usize = 2;

    pub fn n_heads(&self) -> usize {
        match self.mode {
            VolMode::ExogenousVol => self.n_steps,
            VolMode::EndogenousVol => 2 * self.n_steps,
        }
    }

    /// Random initialization: uniform weights scaled by fan-in, zero biases,
    /// unit batch-norm scale, `Y_0 = 0` and `S_0` at the frictionless price.
    pub fn init(cfg: &FbsdeConfig) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut nets = NetworkParams::zeros(cfg.shape, cfg.n_steps, cfg.mode);
        for h in 0..nets.n_heads() {
            let p = cfg.shape.init_params(&mut rng);
            let r = nets.head_range(h);
            nets.params[r].copy_from_slice(&p);
        }
        nets
    }

    /// Every head outputs zero; `Y_0 = 0`, `S_0` frictionless.
    pub fn zeros(shape: NetShape, n_steps: usize, mode: VolMode) -> NetworkParams {
        let heads = match mode {
            VolMode::ExogenousVol => n_steps,
            VolMode::EndogenousVol => 2 * n_steps,
        };
        let np = shape.n_params();
        let mut params = vec![0.0; Self::HEADS + heads * np];
        let c = shape.constant_params(0.0);
        for h in 0..heads {
            params[Self::HEADS + h * np..Self::HEADS + (h + 1) * np].copy_from_slice(&c);
        }
        NetworkParams { shape, n_steps, mode, params, running: vec![shape.init_running(); heads] }
    }

    pub fn theta_y(&self) -> f64 {
        self.params[Self::THETA_Y]
    }

    pub fn theta_s(&self) -> f64 {
        self.params[Self::THETA_S]
    }

    fn head_range(&self, h: usize) -> Range<usize> {
        let np = self.shape.n_params();
        Self::HEADS + h * np..Self::HEADS + (h + 1) * np
    }

    pub fn z_range(&self, k: usize) -> Range<usize> {
        self.head_range(k)
    }

    pub fn sigma_range(&self, k: usize) -> Range<usize> {
        assert_eq!(self.mode, VolMode::EndogenousVol);
        self.head_range(self.n_steps + k)
    }

    pub fn z_head(&self, k: usize) -> &[f64] {
        &self.params[self.z_range(k)]
    }

    pub fn sigma_head(&self, k: usize) -> &[f64] {
        &self.params[self.sigma_range(k)]
    }

    pub fn z_running(&self, k: usize) -> &[f64] {
        &self.running[k]
    }

    pub fn sigma_running(&self, k: usize) -> &[f64] {
        &self.running[self.n_steps + k]
    }

    /// Makes the `Z` head at step `k` output the constant `value`.
    pub fn set_constant_z(&mut self, k: usize, value: f64) {
        let p = self.shape.constant_params(value);
        let r = self.z_range(k);
        self.params[r].copy_from_slice(&p);
    }

    pub fn set_constant_sigma(&mut self, k: usize, value: f64) {
        let p = self.shape.constant_params(value);
        let r = self.sigma_range(k);
        self.params[r].copy_from_slice(&p);
    }

    /// Parameter blocks for gradient clipping: each scalar, then each head.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut b = vec![0..1, 1..2];
        b.extend((0..self.n_heads()).map(|h| self.head_range(h)));
        b
    }
}

/// Rescales each block so that its gradient norm is at most `cap`.
/// Returns how many blocks were clipped.
pub fn clip_gradients(grad: &mut [f64], blocks: &[Range<usize>], cap: f64) -> usize {
    let mut clipped = 0;
    for r in blocks {
        let norm = grad[r.clone()].iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cap {
            let f = cap / norm;
            grad[r.clone()].iter_mut().for_each(|g| *g *= f);
            clipped += 1;
        }
    }
    clipped
}

/// Increments `sqrt(dt) N(0, 1)`, time-major.
pub fn brownian_increments(rng: &mut ChaCha8Rng, n_steps: usize, n_paths: usize, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    (0..n_steps * n_paths)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub y_term: f64,
    pub s_term: f64,
}

/// Stochastic-gradient trainer. The history stays available after a
/// divergence aborts [`Trainer::run`].
pub struct Trainer {
    pub cfg: FbsdeConfig,
    pub scaling: Scaling,
    pub coeffs: Coeffs,
    pub nets: NetworkParams,
    pub history: Vec<LossRecord>,
    /// Number of block clippings applied so far.
    pub clip_events: usize,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: FbsdeConfig) -> Result<Trainer> {
        cfg.validate()?;
        let scaling = Scaling::compute(&cfg)?;
        Self::with_scaling(cfg, scaling)
    }

    pub fn with_scaling(cfg: FbsdeConfig, scaling: Scaling) -> Result<Trainer> {
        cfg.validate()?;
        let coeffs = Coeffs::new(&cfg, &scaling)?;
        let nets = NetworkParams::init(&cfg);
        let adam = Adam::new(nets.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer { cfg, scaling, coeffs, nets, history: Vec::new(), clip_events: 0, adam, rng, iteration: 0 })
    }

    /// One sample-rollout-backprop-update cycle.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let dw = brownian_increments(&mut self.rng, self.cfg.n_steps, self.cfg.batch_size, self.cfg.dt());
        let batch = rollout(&self.coeffs, &self.nets, dw, Mode::Train, it)?;
        let parts = loss(&batch);
        if !parts.total.is_finite() {
            return Err(Error::Divergence { iteration: it, step: self.cfg.n_steps, detail: "non-finite loss".into() });
        }
        let mut grad = backprop(&self.coeffs, &self.nets, &batch)?;
        self.clip_events += clip_gradients(&mut grad, &self.nets.blocks(), self.cfg.clip_norm);
        self.adam.step(&mut self.nets.params, &grad, self.cfg.learning_rate_at(it));
        if self.cfg.shape.batch_norm {
            for (run, stats) in self.nets.running.iter_mut().zip(batch.batch_stats()) {
                net::update_running(run, stats, self.cfg.bn_momentum);
            }
        }
        let rec = LossRecord { iteration: it, loss: parts.total, y_term: parts.y_term, s_term: parts.s_term };
        self.history.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.n_iterations {
            self.step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: NetworkParams,
    pub history: Vec<LossRecord>,
    pub scaling: Scaling,
    pub coeffs: Coeffs,
    pub clip_events: usize,
}

pub fn train(cfg: &FbsdeConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run()?;
    Ok(TrainOutcome { nets: t.nets, history: t.history, scaling: t.scaling, coeffs: t.coeffs, clip_events: t.clip_events })
}

/// Paths per evaluation chunk; each chunk draws from its own stream so
/// results do not depend on the thread count.
const EVAL_CHUNK: usize = 4096;
const EVAL_STREAM_BASE: u64 = 1 << 32;

fn frozen_chunks<T: Send>(
    cfg: &FbsdeConfig,
    coeffs: &Coeffs,
    nets: &NetworkParams,
    n_paths: usize,
    seed: u64,
    f: impl Fn(&RolloutBatch, usize) -> T + Sync,
) -> Result<Vec<T>> {
    let n_chunks = n_paths.div_ceil(EVAL_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let m = EVAL_CHUNK.min(n_paths - c * EVAL_CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(EVAL_STREAM_BASE + c as u64);
            let dw = brownian_increments(&mut rng, cfg.n_steps, m, cfg.dt());
            let b = rollout(coeffs, nets, dw, Mode::Infer, 0)?;
            Ok(f(&b, c * EVAL_CHUNK))
        })
        .collect()
}

/// Out-of-sample terminal fit with frozen parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub n_paths: usize,
    /// Mean of `Y_T^2` in internal units, and its standard error.
    pub y_term: f64,
    pub y_term_se: f64,
    /// Mean of `((S_T - terminal) / a)^2` and its standard error.
    pub s_term: f64,
    pub s_term_se: f64,
    /// Mean of `(S_T - terminal) / a`.
    pub s_bias: f64,
    /// `Y_0` and `(S_0 - S_bar_0) / a` in internal units.
    pub y0: f64,
    pub d0: f64,
    /// `sigma_0 / a - 1`, averaged over paths (constant at time zero).
    pub sigma0_correction: f64,
}

pub fn evaluate(cfg: &FbsdeConfig, coeffs: &Coeffs, nets: &NetworkParams, n_paths: usize, seed: u64) -> Result<Evaluation> {
    let endo = cfg.mode == VolMode::EndogenousVol;
    let sums = frozen_chunks(cfg, coeffs, nets, n_paths, seed, |b, _| {
        let n = b.n_paths;
        let off = b.n_steps * n;
        let mut s = [0.0f64; 6];
        for i in 0..n {
            let y2 = b.y[off + i].powi(2);
            s[0] += y2;
            s[1] += y2 * y2;
            if endo {
                let d = b.d[off + i];
                s[2] += d * d;
                s[3] += d.powi(4);
                s[4] += d;
                s[5] += b.sigma_hat[i] - 1.0;
            }
        }
        s
    })?;
    let mut t = [0.0f64; 6];
    for s in &sums {
        for j in 0..6 {
            t[j] += s[j];
        }
    }
    let n = n_paths as f64;
    let se = |m1: f64, m2: f64| ((m2 / n - (m1 / n).powi(2)).max(0.0) / n).sqrt();
    Ok(Evaluation {
        n_paths,
        y_term: t[0] / n,
        y_term_se: se(t[0], t[1]),
        s_term: t[2] / n,
        s_term_se: se(t[2], t[3]),
        s_bias: t[4] / n,
        y0: nets.theta_y(),
        d0: nets.theta_s(),
        sigma0_correction: t[5] / n,
    })
}

/// Samples of `(state, trading rate)` at step `t_index` in absolute units.
/// The state is `X` in exogenous mode and `phi1` in endogenous mode.
pub fn extract_decoupling_field(
    cfg: &FbsdeConfig,
    coeffs: &Coeffs,
    scaling: &Scaling,
    nets: &NetworkParams,
    t_index: usize,
    n_test: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if t_index > cfg.n_steps {
        return Err(Error::InvalidParam(format!("t_index {t_index} beyond {} steps", cfg.n_steps)));
    }
    if n_test == 0 {
        return Ok(Vec::new());
    }
    let m = cfg.model();
    let phi_c = m.s * m.gamma2 / (m.gamma1 + m.gamma2);
    let chunks = frozen_chunks(cfg, coeffs, nets, n_test, seed, |b, _| {
        let n = b.n_paths;
        (0..n)
            .map(|i| {
                let s = b.state[t_index * n + i] * scaling.x_unit;
                let state = match cfg.mode {
                    VolMode::ExogenousVol => s,
                    VolMode::EndogenousVol => phi_c + s,
                };
                (state, coeffs.unscale_rate(coeffs.rate(b.y[t_index * n + i])))
            })
            .collect::<Vec<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Bin averages of a scatter on `[lo, hi]`: `(centre, mean, count)` per
/// non-empty bin.
pub fn bin_average(points: &[(f64, f64)], lo: f64, hi: f64, n_bins: usize) -> Vec<(f64, f64, usize)> {
    let mut sum = vec![0.0; n_bins];
    let mut cnt = vec![0usize; n_bins];
    let w = (hi - lo) / n_bins as f64;
    for &(x, r) in points {
        if x < lo || x >= hi {
            continue;
        }
        let b = (((x - lo) / w) as usize).min(n_bins - 1);
        sum[b] += r;
        cnt[b] += 1;
    }
    (0..n_bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| (lo + (b as f64 + 0.5) * w, sum[b] / cnt[b] as f64, cnt[b]))
        .collect()
}

/// One row of the price and volatility correction output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionRow {
    pub t: f64,
    pub path_id: usize,
    pub s_minus_sbar: f64,
    pub sigma_minus_a: f64,
}

/// Price and volatility corrections along `n_paths` frozen paths.
pub fn correction_paths(cfg: &FbsdeConfig, coeffs: &Coeffs, nets: &NetworkParams, n_paths: usize, seed: u64) -> Result<Vec<CorrectionRow>> {
    if cfg.mode != VolMode::EndogenousVol {
        return Err(Error::UnsupportedKind { op: "correction paths need endogenous volatility" });
    }
    let a = cfg.dividend.a;
    let dt = cfg.dt();
    let chunks = frozen_chunks(cfg, coeffs, nets, n_paths, seed, |b, first| {
        let n = b.n_paths;
        let mut rows = Vec::new();
        for i in 0..n {
            for k in 0..b.n_steps {
                rows.push(CorrectionRow {
                    t: k as f64 * dt,
                    path_id: first + i,
                    s_minus_sbar: a * b.d[k * n + i],
                    sigma_minus_a: a * (b.sigma_hat[k * n + i] - 1.0),
                });
            }
        }
        rows
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Riccati decoupling `Y = -A(t) X` for quadratic costs with fixed volatility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiOracle {
    pub times: Vec<f64>,
    /// `sqrt(c lambda) tanh(sqrt(c / lambda)(T - t))`.
    pub a_continuous: Vec<f64>,
    /// Exact decoupling of the Euler system:
    /// `A_k = (A_{k+1} + c dt) / (1 + A_{k+1} dt / lambda)`, with `Z_k = -A_{k+1} delta`.
    pub a_discrete: Vec<f64>,
    pub c: f64,
    pub lambda: f64,
    pub delta: f64,
}

pub fn riccati_a(c: f64, lambda: f64, time_to_maturity: f64) -> f64 {
    (c * lambda).sqrt() * ((c / lambda).sqrt() * time_to_maturity).tanh()
}

/// Classical fourth-order Runge-Kutta for `A' = A^2 / lambda - c`,
/// `A(T) = 0`, integrated backward with `substeps` per grid interval.
pub fn riccati_rk4(c: f64, lambda: f64, horizon: f64, n_steps: usize, substeps: usize) -> Vec<f64> {
    let f = |a: f64| a * a / lambda - c;
    let h = -horizon / (n_steps * substeps) as f64;
    let mut out = vec![0.0; n_steps + 1];
    let mut a = 0.0;
    for k in (0..n_steps).rev() {
        for _ in 0..substeps {
            let k1 = f(a);
            let k2 = f(a + 0.5 * h * k1);
            let k3 = f(a + 0.5 * h * k2);
            let k4 = f(a + h * k3);
            a += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[k] = a;
    }
    out
}

pub fn riccati_oracle_exogenous_quadratic(cfg: &FbsdeConfig) -> Result<RiccatiOracle> {
    if cfg.mode != VolMode::ExogenousVol {
        return Err(Error::UnsupportedKind { op: "Riccati oracle needs exogenous volatility" });
    }
    let lambda = match cfg.spec.single_power() {
        Some((q, l)) if q == 2.0 => l,
        _ => return Err(Error::UnsupportedKind { op: "Riccati oracle needs quadratic costs" }),
    };
    let m = cfg.model();
    let c = 0.5 * (m.gamma1 + m.gamma2) * m.sigma * m.sigma;
    let dt = cfg.dt();
    let n = cfg.n_steps;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let a_continuous = times.iter().map(|t| riccati_a(c, lambda, cfg.horizon - t)).collect();
    let mut a_discrete = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let a1 = a_discrete[k + 1];
        a_discrete[k] = (a1 + c * dt) / (1.0 + a1 * dt / lambda);
    }
    Ok(RiccatiOracle { times, a_continuous, a_discrete, c, lambda, delta: m.delta() })
}

impl RiccatiOracle {
    /// Networks that follow the oracle: constant `Z` heads and
    /// `Y_0 = -A(0) X_0`. `discrete` selects the Euler-exact recursion.
    pub fn inject(&self, cfg: &FbsdeConfig, scaling: &Scaling, discrete: bool) -> NetworkParams {
        let mut nets = NetworkParams::zeros(cfg.shape, cfg.n_steps, VolMode::ExogenousVol);
        let a = if discrete { &self.a_discrete } else { &self.a_continuous };
        for k in 0..cfg.n_steps {
            let ak = if discrete { a[k + 1] } else { a[k] };
            nets.set_constant_z(k, -ak * self.delta / scaling.y_unit);
        }
        nets.params[NetworkParams::THETA_Y] = -a[0] * cfg.model().x0() / scaling.y_unit;
        nets
    }
}

/// Frictionless Bachelier price `S_bar_t = S_bar_0 + drift t + a W_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bachelier {
    pub s_bar0: f64,
    pub drift: f64,
    pub vol: f64,
}

/// Frictionless equilibrium price for zero aggregate endowment.
pub fn frictionless_bachelier(cfg: &FbsdeConfig) -> Result<Bachelier> {
    let m = cfg.params;
    if (m.beta1 + m.beta2).abs() > 1e-12 * (m.beta1.abs() + m.beta2.abs()) {
        return Err(Error::InvalidParam("frictionless Bachelier price needs beta1 + beta2 = 0".into()));
    }
    let Dividend { a, b } = cfg.dividend;
    let drift = m.s * m.gamma_bar() * a * a;
    Ok(Bachelier { s_bar0: (b * cfg.horizon) - drift * cfg.horizon, drift, vol: a })
}

impl Bachelier {
    pub fn at(&self, t: f64, w: f64) -> f64 {
        self.s_bar0 + self.drift * t + self.vol * w
    }
}

/// Writers for the run-report artifacts.
pub mod report {
    use super::*;

    fn header<W: Write>(w: &mut W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        Ok(())
    }

    pub fn write_history<W: Write>(mut w: W, history: &[LossRecord], comment: Option<&str>) -> Result<()> {
        header(&mut w, comment)?;
        writeln!(w, "iteration,loss,y_term,s_term")?;
        for r in history {
            writeln!(w, "{},{},{},{}", r.iteration, fmt_num(r.loss), fmt_num(r.y_term), fmt_num(r.s_term))?;
        }
        Ok(())
    }

    pub fn write_field<W: Write>(mut w: W, points: &[(f64, f64)], comment: Option<&str>) -> Result<()> {
        header(&mut w, comment)?;
        writeln!(w, "x,rate")?;
        for (x, r) in points {
            writeln!(w, "{},{}", fmt_num(*x), fmt_num(*r))?;
        }
        Ok(())
    }

    pub fn write_corrections<W: Write>(mut w: W, rows: &[CorrectionRow], comment: Option<&str>) -> Result<()> {
        header(&mut w, comment)?;
        writeln!(w, "t,path_id,S_minus_Sbar,sigma_minus_a")?;
        for r in rows {
            writeln!(w, "{},{},{},{}", fmt_num(r.t), r.path_id, fmt_num(r.s_minus_sbar), fmt_num(r.sigma_minus_a))?;
        }
        Ok(())
    }

    /// Config echo, scaling map and evaluation summary as `key=value` lines.
    pub fn summary(cfg: &FbsdeConfig, scaling: &Scaling, eval: &Evaluation, clip_events: usize) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        kv("mode", format!("{:?}", cfg.mode));
        kv("horizon", fmt_num(cfg.horizon));
        kv("n_steps", cfg.n_steps.to_string());
        kv("spec", serde_json::to_string(&cfg.spec).unwrap_or_default());
        kv("batch_size", cfg.batch_size.to_string());
        kv("learning_rate", fmt_num(cfg.learning_rate));
        kv("lr_decay", format!("{}x every {}", cfg.lr_decay, cfg.lr_decay_every));
        kv("n_iterations", cfg.n_iterations.to_string());
        kv("seed", cfg.seed.to_string());
        kv("hidden", format!("{}x{}", cfg.shape.n1, cfg.shape.n2));
        kv("bn_momentum", cfg.bn_momentum.to_string());
        kv("bn_eps", fmt_num(cfg.bn_eps));
        kv("clip_norm", fmt_num(cfg.clip_norm));
        kv("clip_events", clip_events.to_string());
        kv("sigma_head_scale", fmt_num(cfg.sigma_head_scale));
        kv("rate_cap", fmt_num(cfg.rate_cap));
        kv("scaling.x_unit", fmt_num(scaling.x_unit));
        kv("scaling.rate_unit", fmt_num(scaling.rate_unit));
        kv("scaling.y_unit", fmt_num(scaling.y_unit));
        kv("scaling.vol_unit", fmt_num(scaling.vol_unit));
        kv("eval.n_paths", eval.n_paths.to_string());
        kv("eval.y_term", fmt_num(eval.y_term));
        kv("eval.y_term_se", fmt_num(eval.y_term_se));
        kv("eval.s_term", fmt_num(eval.s_term));
        kv("eval.s_term_se", fmt_num(eval.s_term_se));
        kv("eval.y0", fmt_num(eval.y0 * scaling.y_unit));
        kv("eval.s0_minus_sbar0", fmt_num(eval.d0 * cfg.dividend.a));
        kv("eval.sigma0_minus_a", fmt_num(eval.sigma0_correction * cfg.dividend.a));
        s
    }
}
