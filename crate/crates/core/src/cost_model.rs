//! Convex trading-cost functions `G` and the conjugate machinery the
//! equilibrium solvers need: `G'`, `(G')^{-1}`, `G*` and `(G*)^{-1}`.
//!
//! Smooth costs are sums of power terms `lambda |x|^q / q` with `q` in
//! `(1, 2]`. Proportional costs are a separate kind handled by closed forms
//! elsewhere; the smooth-only functions here reject them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One power term `lambda |x|^q / q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub q: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    Power { q: f64, lambda: f64 },
    Composite { terms: Vec<PowerTerm> },
    Proportional { lambda: f64 },
}

impl CostSpec {
    pub fn power(q: f64, lambda: f64) -> Result<Self> {
        let s = CostSpec::Power { q, lambda };
        s.validate()?;
        Ok(s)
    }

    pub fn composite(terms: Vec<PowerTerm>) -> Result<Self> {
        let s = CostSpec::Composite { terms };
        s.validate()?;
        Ok(s)
    }

    pub fn proportional(lambda: f64) -> Result<Self> {
        let s = CostSpec::Proportional { lambda };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |t: &PowerTerm| -> Result<()> {
            if !(t.q > 1.0 && t.q <= 2.0) {
                return Err(Error::InvalidParam(format!(
                    "cost elasticity q = {} outside (1, 2]",
                    t.q
                )));
            }
            if !(t.lambda > 0.0 && t.lambda.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "cost scale lambda = {} must be positive",
                    t.lambda
                )));
            }
            Ok(())
        };
        match self {
            CostSpec::Power { q, lambda } => check(&PowerTerm { q: *q, lambda: *lambda }),
            CostSpec::Composite { terms } => {
                if terms.is_empty() {
                    return Err(Error::InvalidParam("composite cost has no terms".into()));
                }
                terms.iter().try_for_each(check)
            }
            CostSpec::Proportional { lambda } => {
                if *lambda > 0.0 && lambda.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParam(format!(
                        "proportional cost lambda = {lambda} must be positive"
                    )))
                }
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, CostSpec::Proportional { .. })
    }

    /// Validated smooth view; fails for proportional costs.
    pub fn smooth(&self, op: &'static str) -> Result<SmoothCost> {
        self.validate()?;
        match self {
            CostSpec::Power { q, lambda } => Ok(SmoothCost {
                terms: vec![PowerTerm { q: *q, lambda: *lambda }],
            }),
            CostSpec::Composite { terms } => {
                // Merge equal exponents so the closed forms apply when possible.
                let mut merged: Vec<PowerTerm> = Vec::new();
                for t in terms {
                    match merged.iter_mut().find(|m| m.q == t.q) {
                        Some(m) => m.lambda += t.lambda,
                        None => merged.push(*t),
                    }
                }
                Ok(SmoothCost { terms: merged })
            }
            CostSpec::Proportional { .. } => Err(Error::UnsupportedKind { op }),
        }
    }

    /// Exponent of the single power term, if the cost is a single power.
    pub fn single_power(&self) -> Option<(f64, f64)> {
        match self {
            CostSpec::Power { q, lambda } => Some((*q, *lambda)),
            CostSpec::Composite { terms } if terms.len() == 1 => Some((terms[0].q, terms[0].lambda)),
            _ => None,
        }
    }
}

/// A validated smooth cost. All methods are infallible and cheap enough to
/// call inside integrator and simulation loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCost {
    terms: Vec<PowerTerm>,
}

impl SmoothCost {
    pub fn terms(&self) -> &[PowerTerm] {
        &self.terms
    }

    pub fn g(&self, x: f64) -> f64 {
        let a = x.abs();
        self.terms.iter().map(|t| t.lambda * a.powf(t.q) / t.q).sum()
    }

    pub fn g_prime(&self, x: f64) -> f64 {
        let a = x.abs();
        let m: f64 = self.terms.iter().map(|t| t.lambda * a.powf(t.q - 1.0)).sum();
        m.copysign(x)
    }

    pub fn g_second(&self, x: f64) -> f64 {
        let a = x.abs();
        self.terms
            .iter()
            .map(|t| t.lambda * (t.q - 1.0) * a.powf(t.q - 2.0))
            .sum()
    }

    pub fn g_prime_inverse(&self, y: f64) -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        let a = y.abs();
        let x = match self.terms.as_slice() {
            [t] => (a / t.lambda).powf(1.0 / (t.q - 1.0)),
            _ => self.g_prime_inverse_bisect(a),
        };
        x.copysign(y)
    }

    /// Bisection for `G'(x) = a`, `a > 0`. Each term alone would reach `a`
    /// at `(a / lambda_i)^{1/(q_i-1)}`, so the smallest of those bounds the
    /// root from above; dividing `a` by the term count bounds it from below.
    fn g_prime_inverse_bisect(&self, a: f64) -> f64 {
        let n = self.terms.len() as f64;
        let mut hi = f64::INFINITY;
        let mut lo = f64::INFINITY;
        for t in &self.terms {
            hi = hi.min((a / t.lambda).powf(1.0 / (t.q - 1.0)));
            lo = lo.min((a / (n * t.lambda)).powf(1.0 / (t.q - 1.0)));
        }
        let f = |x: f64| self.g_prime(x) - a;
        bisect_increasing(f, lo, hi)
    }

    pub fn legendre(&self, y: f64) -> f64 {
        let a = y.abs();
        if a == 0.0 {
            return 0.0;
        }
        match self.terms.as_slice() {
            [t] => {
                let p = t.q / (t.q - 1.0);
                (1.0 - 1.0 / t.q) * t.lambda.powf(-1.0 / (t.q - 1.0)) * a.powf(p)
            }
            _ => {
                let x = self.g_prime_inverse(a);
                a * x - self.g(x)
            }
        }
    }

    /// Derivative of `G*`, equal to `(G')^{-1}`.
    pub fn legendre_prime(&self, y: f64) -> f64 {
        self.g_prime_inverse(y)
    }

    /// Inverse of `G*` on the non-negative branch. `v` must be `>= 0`.
    pub fn legendre_inverse(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        match self.terms.as_slice() {
            [t] => {
                let k = (1.0 - 1.0 / t.q) * t.lambda.powf(-1.0 / (t.q - 1.0));
                (v / k).powf((t.q - 1.0) / t.q)
            }
            _ => {
                // G dominates each term, so G* is dominated by each term's
                // conjugate and the single-term inverses are lower bounds.
                let mut lo = 0.0f64;
                for t in &self.terms {
                    let k = (1.0 - 1.0 / t.q) * t.lambda.powf(-1.0 / (t.q - 1.0));
                    lo = lo.max((v / k).powf((t.q - 1.0) / t.q));
                }
                let mut hi = 2.0 * lo;
                while self.legendre(hi) < v {
                    lo = hi;
                    hi *= 2.0;
                }
                bisect_increasing(|y| self.legendre(y) - v, lo, hi)
            }
        }
    }
}

/// Root of an increasing function on `[lo, hi]` to machine precision.
fn bisect_increasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= 1e-15 * hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn eval_g(spec: &CostSpec, x: f64) -> Result<f64> {
    Ok(spec.smooth("eval_G")?.g(x))
}

pub fn eval_gprime(spec: &CostSpec, x: f64) -> Result<f64> {
    Ok(spec.smooth("eval_Gprime")?.g_prime(x))
}

pub fn eval_gprime_inverse(spec: &CostSpec, y: f64) -> Result<f64> {
    let c = spec.smooth("eval_Gprime_inverse")?;
    let x = c.g_prime_inverse(y);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("(G')^-1({y}) did not converge")))
    }
}

pub fn eval_legendre(spec: &CostSpec, y: f64) -> Result<f64> {
    Ok(spec.smooth("eval_legendre")?.legendre(y))
}

pub fn eval_legendre_inverse(spec: &CostSpec, v: f64) -> Result<f64> {
    let c = spec.smooth("eval_legendre_inverse")?;
    if v < 0.0 || v.is_nan() {
        return Err(Error::Domain(format!(
            "(G*)^-1 is defined on [0, inf), got {v}"
        )));
    }
    Ok(c.legendre_inverse(v))
}

/// Empirical diagnostics for the regularity conditions on a smooth cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// Smallest second difference of `G`, scaled by `1 + |G|`.
    pub min_second_difference: f64,
    /// Largest symmetry defect `|G(x) - G(-x)| / (1 + |G(x)|)`.
    pub max_asymmetry: f64,
    /// Empirical upper bound of `G''` for `|x| >= x0`.
    pub curvature_bound: f64,
    pub x0: f64,
}

/// Checks convexity, symmetry, strict monotonicity of `G'` and bounded
/// curvature away from the origin on the given symmetric grid.
pub fn validate_assumption1(spec: &CostSpec, grid: &[f64]) -> Result<AssumptionReport> {
    let c = spec.smooth("validate_assumption1")?;
    let g: Vec<f64> = grid.iter().map(|&x| c.g(x)).collect();
    let gm: Vec<f64> = grid.iter().map(|&x| c.g(-x)).collect();
    let gp: Vec<f64> = grid.iter().map(|&x| c.g_prime(x)).collect();
    validate_tabulated(grid, &g, &gm, &gp)
}

/// Same checks on tabulated values: `g[i] = G(x_i)`, `g_neg[i] = G(-x_i)`,
/// `gp[i] = G'(x_i)`. Exposed so that non-convex probes can be checked.
pub fn validate_tabulated(
    grid: &[f64],
    g: &[f64],
    g_neg: &[f64],
    gp: &[f64],
) -> Result<AssumptionReport> {
    let n = grid.len();
    if n == 0 || g.len() != n || g_neg.len() != n || gp.len() != n {
        return Err(Error::InvalidParam("grid and tables must be nonempty and equal length".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("grid must be strictly ascending".into()));
    }
    let span = grid[n - 1].abs().max(grid[0].abs());
    for i in 0..n {
        if (grid[i] + grid[n - 1 - i]).abs() > 1e-12 * (1.0 + span) {
            return Err(Error::InvalidParam("grid must be symmetric about 0".into()));
        }
    }

    // Convexity via increasing divided differences (works on any grid).
    let mut min_sd = f64::INFINITY;
    for i in 1..n.saturating_sub(1) {
        let s0 = (g[i] - g[i - 1]) / (grid[i] - grid[i - 1]);
        let s1 = (g[i + 1] - g[i]) / (grid[i + 1] - grid[i]);
        let h = 0.5 * (grid[i + 1] - grid[i - 1]);
        let sd = (s1 - s0) * h / (1.0 + g[i].abs());
        min_sd = min_sd.min(sd);
    }
    if min_sd < -1e-10 {
        return Err(Error::Validation {
            clause: "convexity",
            detail: format!("second difference {min_sd:e} below -1e-10"),
        });
    }

    let mut max_asym = 0.0f64;
    for i in 0..n {
        max_asym = max_asym.max((g[i] - g_neg[i]).abs() / (1.0 + g[i].abs()));
    }
    if max_asym > 1e-12 {
        return Err(Error::Validation {
            clause: "symmetry",
            detail: format!("|G(x) - G(-x)| relative defect {max_asym:e}"),
        });
    }

    let pos: Vec<usize> = (0..n).filter(|&i| grid[i] > 0.0).collect();
    for w in pos.windows(2) {
        if gp[w[1]] <= gp[w[0]] {
            return Err(Error::Validation {
                clause: "strict monotonicity of G'",
                detail: format!("G' not increasing between x = {} and {}", grid[w[0]], grid[w[1]]),
            });
        }
    }
    if let Some(&i) = pos.first() {
        if gp[i] <= 0.0 {
            return Err(Error::Validation {
                clause: "strict monotonicity of G'",
                detail: format!("G'({}) = {} is not positive", grid[i], gp[i]),
            });
        }
    }

    // Curvature bound outside x0: finite differences of G' on the positive
    // half. A tail curvature above the inner maximum signals super-quadratic
    // growth, which the regularity conditions exclude.
    let x_top = pos.last().map(|&i| grid[i]).unwrap_or(0.0);
    let x0 = if x_top > 2.0 { 1.0 } else { 0.5 * x_top };
    let mut c_bound = 0.0f64;
    let mut first = None;
    let mut last = 0.0;
    for w in pos.windows(2) {
        let (a, b) = (w[0], w[1]);
        if grid[a] < x0 {
            continue;
        }
        let curv = (gp[b] - gp[a]) / (grid[b] - grid[a]);
        c_bound = c_bound.max(curv);
        first.get_or_insert(curv);
        last = curv;
    }
    if let Some(f) = first {
        if last > f * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Validation {
                clause: "bounded curvature",
                detail: format!("G'' grows from {f:e} to {last:e} toward the grid edge"),
            });
        }
    }
    Ok(AssumptionReport {
        min_second_difference: if min_sd.is_finite() { min_sd } else { 0.0 },
        max_asymmetry: max_asym,
        curvature_bound: c_bound,
        x0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn hand_values() {
        let p2 = CostSpec::power(2.0, 2.0).unwrap();
        assert_eq!(eval_g(&p2, 3.0).unwrap(), 9.0);
        let p15 = CostSpec::power(1.5, 3.0).unwrap();
        assert!(rel(eval_g(&p15, 4.0).unwrap(), 16.0) < 1e-14);
        assert!(rel(eval_gprime(&p15, 4.0).unwrap(), 6.0) < 1e-14);
        assert_eq!(eval_gprime(&p15, 0.0).unwrap(), 0.0);
        assert_eq!(eval_g(&p15, 0.0).unwrap(), 0.0);
        assert!(rel(eval_gprime_inverse(&p2, 5.0).unwrap(), 2.5) < 1e-15);
    }

    #[test]
    fn composite_inverse_by_substitution() {
        let c = CostSpec::composite(vec![
            PowerTerm { q: 2.0, lambda: 1.0 },
            PowerTerm { q: 1.5, lambda: 1.0 },
        ])
        .unwrap();
        let x = eval_gprime_inverse(&c, 2.0).unwrap();
        assert!((x - 1.0).abs() < 1e-12, "{x}");
        assert!((eval_gprime_inverse(&c, -2.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn legendre_closed_forms() {
        let lam = 0.7;
        let p2 = CostSpec::power(2.0, lam).unwrap();
        for &y in &[0.3, -1.2, 5.0] {
            assert!(rel(eval_legendre(&p2, y).unwrap(), y * y / (2.0 * lam)) < 1e-14);
        }
        let p15 = CostSpec::power(1.5, 3.0).unwrap();
        for &y in &[0.5, 2.0, -3.0] {
            let y: f64 = y;
            assert!(rel(eval_legendre(&p15, y).unwrap(), y.abs().powi(3) / 27.0) < 1e-13);
        }
        assert_eq!(eval_legendre(&p15, 0.0).unwrap(), 0.0);
        assert_eq!(eval_legendre_inverse(&p15, 0.0).unwrap(), 0.0);
        assert!(matches!(eval_legendre_inverse(&p15, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn proportional_rejected() {
        let p = CostSpec::proportional(0.31).unwrap();
        assert!(matches!(eval_g(&p, 1.0), Err(Error::UnsupportedKind { .. })));
        assert!(matches!(eval_gprime_inverse(&p, 1.0), Err(Error::UnsupportedKind { .. })));
        assert!(matches!(eval_legendre(&p, 1.0), Err(Error::UnsupportedKind { .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(CostSpec::power(1.0, 1.0).is_err());
        assert!(CostSpec::power(2.5, 1.0).is_err());
        assert!(CostSpec::power(1.5, 0.0).is_err());
        assert!(CostSpec::composite(vec![]).is_err());
        assert!(CostSpec::proportional(-1.0).is_err());
    }

    fn sym_grid(half: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn assumption_checks_pass_for_powers() {
        let grid = sym_grid(10.0, 201);
        validate_assumption1(&CostSpec::power(2.0, 1.0).unwrap(), &grid).unwrap();
        let r = validate_assumption1(&CostSpec::power(1.5, 3.0).unwrap(), &grid).unwrap();
        assert!(r.curvature_bound > 0.0 && r.x0 == 1.0);
    }

    #[test]
    fn concave_probe_fails_convexity() {
        let grid = sym_grid(3.0, 61);
        let g: Vec<f64> = grid.iter().map(|x: &f64| x.abs().sqrt()).collect();
        let gp: Vec<f64> = grid
            .iter()
            .map(|&x: &f64| if x == 0.0 { 0.0 } else { 0.5 * x.signum() / x.abs().sqrt() })
            .collect();
        let err = validate_tabulated(&grid, &g, &g, &gp).unwrap_err();
        assert!(matches!(err, Error::Validation { clause: "convexity", .. }), "{err}");
    }

    #[test]
    fn superquadratic_probe_fails_curvature() {
        let grid = sym_grid(10.0, 201);
        let g: Vec<f64> = grid.iter().map(|x: &f64| x.powi(4) / 4.0).collect();
        let gp: Vec<f64> = grid.iter().map(|x: &f64| x.powi(3)).collect();
        let err = validate_tabulated(&grid, &g, &g, &gp).unwrap_err();
        assert!(matches!(err, Error::Validation { clause: "bounded curvature", .. }));
    }
}
