//! Scalar Dormand-Prince 5(4) integrator with step-size control.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Rk45Options {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

pub(crate) enum Flow {
    Continue,
    Stop,
}

pub(crate) struct Outcome {
    #[allow(dead_code)]
    pub x_end: f64,
    pub y_end: f64,
    pub stopped: bool,
    /// Values at the requested nodes, in the order given.
    pub at_nodes: Vec<f64>,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Differences between the fifth- and embedded fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = f(x, y)` from `(x0, y0)` to `x1` (either direction).
///
/// `nodes` must be ordered along the direction of integration and lie in
/// the closed interval between `x0` and `x1`; steps are shortened to land on
/// each node exactly. `after_step` sees every accepted point and may stop
/// the integration early.
pub(crate) fn integrate(
    f: impl Fn(f64, f64) -> f64,
    x0: f64,
    y0: f64,
    x1: f64,
    nodes: &[f64],
    opts: Rk45Options,
    mut after_step: impl FnMut(f64, f64) -> Flow,
) -> Result<Outcome> {
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    let span = (x1 - x0).abs();
    let mut at_nodes = Vec::with_capacity(nodes.len());
    let mut next_node = 0usize;
    let mut x = x0;
    let mut y = y0;
    while next_node < nodes.len() && (nodes[next_node] - x0) * dir <= 0.0 {
        at_nodes.push(y0);
        next_node += 1;
    }
    if span == 0.0 {
        return Ok(Outcome { x_end: x, y_end: y, stopped: false, at_nodes });
    }

    let mut h = span * 1e-3;
    let mut k1 = f(x, y);
    let mut steps = 0usize;
    let h_min = span * 1e-14;

    loop {
        let target = if next_node < nodes.len() { nodes[next_node] } else { x1 };
        let remaining = (target - x) * dir;
        let mut landing = false;
        if h >= remaining {
            h = remaining;
            landing = true;
        }
        let hs = h * dir;

        let k2 = f(x + C2 * hs, y + hs * A21 * k1);
        let k3 = f(x + C3 * hs, y + hs * (A31 * k1 + A32 * k2));
        let k4 = f(x + C4 * hs, y + hs * (A41 * k1 + A42 * k2 + A43 * k3));
        let k5 = f(x + C5 * hs, y + hs * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
        let k6 = f(x + hs, y + hs * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
        let y_new = y + hs * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
        let k7 = f(x + hs, y_new);
        let err_est = hs * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);

        let scale = opts.atol + opts.rtol * y.abs().max(y_new.abs());
        let err = (err_est / scale).abs();

        if !y_new.is_finite() || !err.is_finite() {
            h *= 0.25;
            if h < h_min {
                return Err(Error::Solver { last_good_x: x, detail: "non-finite state".into() });
            }
            continue;
        }

        if err <= 1.0 {
            x = if landing { target } else { x + hs };
            y = y_new;
            k1 = k7;
            steps += 1;
            if landing && next_node < nodes.len() {
                while next_node < nodes.len() && (nodes[next_node] - x) * dir <= 0.0 {
                    at_nodes.push(y);
                    next_node += 1;
                }
            }
            if let Flow::Stop = after_step(x, y) {
                return Ok(Outcome { x_end: x, y_end: y, stopped: true, at_nodes });
            }
            if (x1 - x) * dir <= 0.0 && next_node >= nodes.len() {
                return Ok(Outcome { x_end: x, y_end: y, stopped: false, at_nodes });
            }
            if steps >= opts.max_steps {
                return Err(Error::Solver { last_good_x: x, detail: "step budget exhausted".into() });
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // A node landing may have produced an artificially short step.
            if !landing {
                h *= fac;
            } else {
                h = h.max(span * 1e-6) * fac.max(1.0);
            }
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.1);
            if h < h_min {
                return Err(Error::Solver { last_good_x: x, detail: "step size underflow".into() });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Rk45Options {
        Rk45Options { rtol: 1e-11, atol: 1e-14, max_steps: 100_000 }
    }

    #[test]
    fn exponential_growth_and_nodes() {
        let nodes = [0.5, 1.0, 2.0];
        let out = integrate(|_, y| y, 0.0, 1.0, 2.0, &nodes, opts(), |_, _| Flow::Continue).unwrap();
        for (v, x) in out.at_nodes.iter().zip(nodes) {
            assert!((v - f64::exp(x)).abs() < 1e-9 * f64::exp(x), "{v} vs {}", f64::exp(x));
        }
        assert!((out.x_end - 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_direction() {
        // y' = -2x y, y(1) = e^{-1}, so y(0) = 1.
        let out = integrate(|x, y| -2.0 * x * y, 1.0, (-1.0f64).exp(), 0.0, &[1.0, 0.5, 0.0], opts(), |_, _| {
            Flow::Continue
        })
        .unwrap();
        assert!((out.y_end - 1.0).abs() < 1e-10);
        assert!((out.at_nodes[1] - (-0.25f64).exp()).abs() < 1e-10);
        assert_eq!(out.at_nodes.len(), 3);
    }

    #[test]
    fn early_stop() {
        let out = integrate(|_, _| 1.0, 0.0, 0.0, 10.0, &[], opts(), |_, y| {
            if y > 3.0 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        })
        .unwrap();
        assert!(out.stopped && out.x_end < 10.0);
    }
}
