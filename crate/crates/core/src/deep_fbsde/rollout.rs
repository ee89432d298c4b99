//! Euler rollout of the scaled forward system and its exact reverse pass.
//!
//! Arrays over `(time, path)` are time-major: `k * n_paths + i`.

use super::net::{self, HeadCache, Mode};
use super::{Coeffs, NetworkParams, VolMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub mode: VolMode,
    pub n_paths: usize,
    pub n_steps: usize,
    /// Brownian motion at the grid times, `(n_steps + 1) x n_paths`.
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
    /// Exogenous mode: scaled state `X / x_unit`. Endogenous mode: scaled
    /// position deviation `(phi1 - phi_c) / x_unit`.
    pub state: Vec<f64>,
    /// Scaled marginal cost `Y / y_unit`.
    pub y: Vec<f64>,
    /// Scaled price correction `(S - S_bar) / a` (endogenous only).
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    /// `sigma / a` (endogenous only).
    pub sigma_hat: Vec<f64>,
    z_cache: Vec<HeadCache>,
    s_cache: Vec<HeadCache>,
}

impl RolloutBatch {
    pub fn at(&self, v: &[f64], k: usize, i: usize) -> f64 {
        v[k * self.n_paths + i]
    }

    /// Network input `p` at step `k` (the position deviation).
    fn position(&self, c: &Coeffs, k: usize, i: usize) -> f64 {
        let n = self.n_paths;
        match self.mode {
            VolMode::ExogenousVol => self.state[k * n + i] - c.d_hat * self.w[k * n + i],
            VolMode::EndogenousVol => self.state[k * n + i],
        }
    }

    fn has_cache(&self) -> bool {
        self.z_cache.len() == self.n_steps
    }

    /// Batch statistics of every head, in head order (Z heads then sigma heads).
    pub fn batch_stats(&self) -> impl Iterator<Item = &[f64]> {
        self.z_cache.iter().chain(&self.s_cache).map(|c| c.batch_stats.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub y_term: f64,
    pub s_term: f64,
}

/// Runs the Euler scheme for the increments `dw` (`n_steps x n_paths`).
pub fn rollout(c: &Coeffs, nets: &NetworkParams, dw: Vec<f64>, mode: Mode, iteration: usize) -> Result<RolloutBatch> {
    let n_steps = nets.n_steps;
    let np = dw.len() / n_steps;
    let endo = nets.mode == VolMode::EndogenousVol;
    let mut w = vec![0.0; (n_steps + 1) * np];
    for k in 0..n_steps {
        for i in 0..np {
            w[(k + 1) * np + i] = w[k * np + i] + dw[k * np + i];
        }
    }
    let mut b = RolloutBatch {
        mode: nets.mode,
        n_paths: np,
        n_steps,
        w,
        dw,
        state: vec![0.0; (n_steps + 1) * np],
        y: vec![0.0; (n_steps + 1) * np],
        d: if endo { vec![0.0; (n_steps + 1) * np] } else { Vec::new() },
        z: vec![0.0; n_steps * np],
        sigma_hat: if endo { vec![0.0; n_steps * np] } else { Vec::new() },
        z_cache: Vec::new(),
        s_cache: Vec::new(),
    };
    b.state[..np].fill(c.state0);
    b.y[..np].fill(nets.theta_y());
    if endo {
        b.d[..np].fill(nets.theta_s());
    }
    let dt = c.dt;
    let mut input = vec![0.0; 2 * np];
    for k in 0..n_steps {
        for i in 0..np {
            input[2 * i] = b.w[k * np + i];
            input[2 * i + 1] = b.position(c, k, i);
        }
        let (z, zc) = net::forward(&nets.shape, nets.z_head(k), nets.z_running(k), &input, mode, c.bn_eps)?;
        if let Some(zc) = zc {
            b.z_cache.push(zc);
        }
        b.z[k * np..(k + 1) * np].copy_from_slice(&z);
        if endo {
            let (s, sc) = net::forward(&nets.shape, nets.sigma_head(k), nets.sigma_running(k), &input, mode, c.bn_eps)?;
            if let Some(sc) = sc {
                b.s_cache.push(sc);
            }
            for i in 0..np {
                b.sigma_hat[k * np + i] = 1.0 + c.eps_sigma * s[i];
            }
        }
        let (cur, next) = (k * np, (k + 1) * np);
        for i in 0..np {
            let y = b.y[cur + i];
            let x = b.state[cur + i];
            let dwi = b.dw[cur + i];
            let r = c.rate(y);
            if endo {
                let sh = b.sigma_hat[cur + i];
                let p = x;
                let wk = b.w[cur + i];
                b.state[next + i] = p + c.rho * r * dt;
                b.y[next + i] = y + (sh * sh * c.k1 * p + sh * c.k2 * wk) * dt + z[i] * dwi;
                b.d[next + i] = b.d[cur + i]
                    + (c.k0 * (sh * sh - 1.0) + sh * sh * c.k3 * p + sh * c.k4 * wk) * dt
                    + (sh - 1.0) * dwi;
            } else {
                b.state[next + i] = x + c.rho * r * dt + c.d_hat * dwi;
                b.y[next + i] = y + c.c_hat * x * dt + z[i] * dwi;
            }
        }
        let bad = (0..np).find(|&i| {
            !(b.state[next + i].is_finite() && b.y[next + i].is_finite() && (!endo || b.d[next + i].is_finite()))
        });
        if let Some(i) = bad {
            return Err(Error::Divergence {
                iteration,
                step: k + 1,
                detail: format!("non-finite state on path {i}"),
            });
        }
    }
    Ok(b)
}

/// Sample mean of `Y_T^2`, plus `(S_T - terminal)^2` in endogenous mode.
pub fn loss(b: &RolloutBatch) -> LossParts {
    let n = b.n_paths;
    let off = b.n_steps * n;
    let y_term = b.y[off..off + n].iter().map(|v| v * v).sum::<f64>() / n as f64;
    let s_term = if b.mode == VolMode::EndogenousVol {
        b.d[off..off + n].iter().map(|v| v * v).sum::<f64>() / n as f64
    } else {
        0.0
    };
    LossParts { total: y_term + s_term, y_term, s_term }
}

/// Exact gradient of [`loss`] with respect to `nets.params`.
pub fn backprop(c: &Coeffs, nets: &NetworkParams, b: &RolloutBatch) -> Result<Vec<f64>> {
    if !b.has_cache() {
        return Err(Error::State("backprop needs a training-mode rollout".into()));
    }
    let np = b.n_paths;
    let n_steps = b.n_steps;
    let endo = b.mode == VolMode::EndogenousVol;
    let dt = c.dt;
    let mut grad = vec![0.0; nets.params.len()];
    let inv = 2.0 / np as f64;
    let last = n_steps * np;
    let mut y_bar: Vec<f64> = b.y[last..last + np].iter().map(|v| inv * v).collect();
    let mut s_bar = vec![0.0; np];
    let d_bar: Vec<f64> = if endo { b.d[last..last + np].iter().map(|v| inv * v).collect() } else { vec![0.0; np] };
    let mut dz = vec![0.0; np];
    let mut ds = vec![0.0; np];

    for k in (0..n_steps).rev() {
        let cur = k * np;
        for i in 0..np {
            dz[i] = y_bar[i] * b.dw[cur + i];
        }
        let zr = nets.z_range(k);
        let du_z = net::backward(&nets.shape, nets.z_head(k), &b.z_cache[k], &dz, &mut grad[zr]);
        if endo {
            for i in 0..np {
                let sh = b.sigma_hat[cur + i];
                let p = b.state[cur + i];
                let wk = b.w[cur + i];
                let sh_bar = y_bar[i] * (2.0 * sh * c.k1 * p + c.k2 * wk) * dt
                    + d_bar[i] * ((2.0 * c.k0 * sh + 2.0 * sh * c.k3 * p + c.k4 * wk) * dt + b.dw[cur + i]);
                ds[i] = c.eps_sigma * sh_bar;
            }
            let sr = nets.sigma_range(k);
            let du_s = net::backward(&nets.shape, nets.sigma_head(k), &b.s_cache[k], &ds, &mut grad[sr]);
            for i in 0..np {
                let sh = b.sigma_hat[cur + i];
                let y = b.y[cur + i];
                let p_prev = s_bar[i];
                s_bar[i] = p_prev + (y_bar[i] * c.k1 + d_bar[i] * c.k3) * sh * sh * dt + du_z[2 * i + 1] + du_s[2 * i + 1];
                y_bar[i] += p_prev * c.rho * c.rate_prime(y) * dt;
            }
        } else {
            for i in 0..np {
                let y = b.y[cur + i];
                let x_prev = s_bar[i];
                s_bar[i] = x_prev + y_bar[i] * c.c_hat * dt + du_z[2 * i + 1];
                y_bar[i] += x_prev * c.rho * c.rate_prime(y) * dt;
            }
        }
    }
    grad[NetworkParams::THETA_Y] = y_bar.iter().sum();
    if endo {
        grad[NetworkParams::THETA_S] = d_bar.iter().sum();
    }
    Ok(grad)
}
