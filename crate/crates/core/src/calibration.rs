//! Calibration of agents and trading costs to market summary statistics.
//!
//! Aggregate risk aversion matches the mean absolute return. Endowment
//! volatility and cost size are then chosen per cost model:
//! proportional costs match turnover exactly, and every smooth power cost
//! matches both turnover and the stationary variance of the state under
//! proportional costs. Power costs other than quadratic go through the
//! parameter-free canonical equation and two quadratures of its solution.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equilibrium_ode::{proportional_band, solve_canonical, ModelParams, OdeSolution};
use crate::error::{Error, Result};
use crate::simulator::canonical_weights;

/// Fraction of the mean price used as the default proportional cost.
pub const DEFAULT_COST_FRACTION: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    /// Daily absolute price volatility.
    pub sigma: f64,
    /// Mean daily absolute price change.
    pub mu_bar: f64,
    /// Shares outstanding.
    pub s: f64,
    /// Mean daily share turnover.
    pub sh_tu: f64,
    pub price_level: f64,
    /// Proportional cost per share.
    pub lambda1: f64,
}

impl MarketData {
    /// Summary statistics of a US large-cap index over 2009-2018, the
    /// defaults used throughout.
    pub fn reference() -> Self {
        MarketData {
            sigma: 1.88,
            mu_bar: 0.072,
            s: 2.46e11,
            sh_tu: 1.84e9,
            price_level: 124.11,
            lambda1: 0.31,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma", self.sigma),
            ("mu_bar", self.mu_bar),
            ("s", self.s),
            ("sh_tu", self.sh_tu),
            ("price_level", self.price_level),
            ("lambda1", self.lambda1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("market {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    #[allow(dead_code)]
    date: String,
    price: f64,
    volume: f64,
    shares_outstanding: f64,
}

/// Reads `date,price,volume,shares_outstanding`. Lines starting with `#`
/// are skipped. The proportional cost defaults to 0.25% of the mean price.
pub fn ingest_timeseries(path: impl AsRef<Path>) -> Result<MarketData> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(r: R) -> Result<MarketData> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let expected = ["date", "price", "volume", "shares_outstanding"];
    let headers = match rd.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(e.into()),
    };
    if headers.is_empty() {
        return Err(Error::InsufficientData("empty file".into()));
    }
    if headers.iter().collect::<Vec<_>>() != expected {
        let line = rd.position().line().max(1) as usize;
        return Err(Error::Parse {
            line,
            detail: format!("header must be `{}`, found `{}`", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut prices = Vec::new();
    let mut volume = 0.0;
    let mut shares = 0.0;
    for rec in rd.deserialize::<Row>() {
        let row = rec?;
        prices.push(row.price);
        volume += row.volume;
        shares = row.shares_outstanding;
    }
    if prices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 rows, found {}",
            prices.len()
        )));
    }
    let diffs: Vec<f64> = prices.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sigma = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let price_level = prices.iter().sum::<f64>() / prices.len() as f64;
    Ok(MarketData {
        sigma,
        mu_bar: mean,
        s: shares,
        sh_tu: volume / prices.len() as f64,
        price_level,
        lambda1: DEFAULT_COST_FRACTION * price_level,
    })
}

/// `gamma_bar = mu_bar / (s sigma^2)`, under zero aggregate endowment.
pub fn calibrate_frictionless(data: &MarketData) -> Result<f64> {
    if data.mu_bar == 0.0 {
        return Err(Error::Degenerate("mu_bar = 0 gives zero aggregate risk aversion".into()));
    }
    if !(data.sigma > 0.0 && data.s > 0.0) {
        return Err(Error::InvalidParam("sigma and s must be positive".into()));
    }
    Ok(data.mu_bar / (data.s * data.sigma * data.sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskAversions {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl RiskAversions {
    pub fn sum(&self) -> f64 {
        self.gamma1 + self.gamma2
    }
    pub fn half(&self) -> f64 {
        0.5 * self.sum()
    }
}

/// `gamma2 = ratio gamma1` with harmonic-mean constraint `gamma1 gamma2 / (gamma1 + gamma2) = gamma_bar`.
pub fn split_risk_aversion(gamma_bar: f64, ratio: f64) -> Result<RiskAversions> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidParam(format!("risk-aversion ratio {ratio} must be positive")));
    }
    let gamma1 = gamma_bar * (1.0 + ratio) / ratio;
    Ok(RiskAversions { gamma1, gamma2: ratio * gamma1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProportionalCalibration {
    pub beta: f64,
    pub delta: f64,
    pub band: f64,
}

/// Endowment volatility matching turnover under proportional costs.
pub fn calibrate_proportional(data: &MarketData, g: &RiskAversions) -> Result<ProportionalCalibration> {
    data.validate()?;
    let beta = (24.0 * data.sh_tu.powi(3) * data.lambda1 * data.sigma.powi(2) / g.sum()).powf(0.25);
    let params = agents(data, g, beta)?;
    let band = proportional_band(&params, data.lambda1)?;
    let delta = beta / data.sigma;
    let turnover = delta * delta / (2.0 * band);
    if (turnover / data.sh_tu - 1.0).abs() > 1e-10 {
        return Err(Error::Numeric(format!(
            "proportional turnover identity failed: {turnover:e} vs {:e}",
            data.sh_tu
        )));
    }
    Ok(ProportionalCalibration { beta, delta, band })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerCalibration {
    pub q: f64,
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
}

/// Quadratic cost and endowment volatility matching turnover and the target
/// stationary standard deviation of the state.
pub fn calibrate_quadratic(data: &MarketData, g: &RiskAversions, target_std: f64) -> Result<PowerCalibration> {
    data.validate()?;
    if !(target_std > 0.0) {
        return Err(Error::InvalidParam("target std must be positive".into()));
    }
    let gs2 = g.half() * data.sigma.powi(2);
    // OU std = ShTu sqrt(pi lambda / (2 gamma sigma^2)).
    let lambda = 2.0 * gs2 * (target_std / data.sh_tu).powi(2) / PI;
    let beta = data.sh_tu / (g.sum() / (2.0 * PI * PI * data.sigma.powi(2) * lambda)).powf(0.25);
    Ok(PowerCalibration { q: 2.0, lambda, delta: beta / data.sigma, beta })
}

/// Mean daily turnover under quadratic costs: `((g1 + g2) / (2 pi^2 sigma^2 lambda))^{1/4} beta`.
pub fn quadratic_turnover(g: &RiskAversions, sigma: f64, lambda: f64, beta: f64) -> f64 {
    (g.sum() / (2.0 * PI * PI * sigma * sigma * lambda)).powf(0.25) * beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalStats {
    pub q: f64,
    pub c_tilde: f64,
    pub v_tilde: f64,
}

/// Tail threshold for the canonical weight at the grid end.
pub const TAIL_TOLERANCE: f64 = 1e-12;

/// Normalizing constant and second moment of the canonical stationary law.
pub fn canonical_stats(canonical: &OdeSolution, q: f64) -> Result<CanonicalStats> {
    let w = canonical_weights(canonical, q)?;
    if !(w.edge_weight < TAIL_TOLERANCE) {
        return Err(Error::TailNotConverged { x_end: canonical.x_max(), value: w.edge_weight });
    }
    Ok(CanonicalStats { q, c_tilde: w.c_tilde, v_tilde: w.v_tilde })
}

/// Canonical grid spacing used for calibration quadratures.
pub const CANONICAL_SPACING: f64 = 0.002;

/// Solves the canonical equation on a grid of fixed spacing, widening it by
/// half until the tail weight falls below [`TAIL_TOLERANCE`].
pub fn canonical_for_stats(q: f64, spacing: f64) -> Result<(OdeSolution, CanonicalStats)> {
    let mut x_max = 8.0;
    for _ in 0..12 {
        let half_n = (x_max / spacing).ceil() as usize;
        let sol = solve_canonical(q, half_n as f64 * spacing, 2 * half_n + 1)?;
        match canonical_stats(&sol, q) {
            Ok(st) => return Ok((sol, st)),
            Err(Error::TailNotConverged { .. }) => x_max *= 1.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::TailNotConverged { x_end: x_max, value: f64::NAN })
}

/// Power cost and endowment volatility for elasticity `q`, given canonical
/// statistics for that `q`.
pub fn calibrate_power_with(data: &MarketData, g: &RiskAversions, stats: &CanonicalStats) -> Result<PowerCalibration> {
    data.validate()?;
    let q = stats.q;
    let (c, v) = (stats.c_tilde, stats.v_tilde);
    let gs2 = g.half() * data.sigma.powi(2);
    let lambda = q * c / v * (2.0 * c / data.sh_tu).powf(q - 1.0) * data.lambda1;
    let delta = (lambda / (2f64.powf(q - 1.0) * q * gs2) * (data.sh_tu / c).powf(q + 2.0)).powf(0.25);
    Ok(PowerCalibration { q, lambda, delta, beta: data.sigma * delta })
}

pub fn calibrate_power(data: &MarketData, g: &RiskAversions, q: f64, lambda1: f64) -> Result<PowerCalibration> {
    let d = MarketData { lambda1, ..*data };
    let (_, stats) = canonical_for_stats(q, CANONICAL_SPACING)?;
    calibrate_power_with(&d, g, &stats)
}

/// Agents at their frictionless allocation with `beta1 = -beta2 = beta`.
pub fn agents(data: &MarketData, g: &RiskAversions, beta: f64) -> Result<ModelParams> {
    ModelParams::at_frictionless_start(g.gamma1, g.gamma2, data.sigma, beta, -beta, data.s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCalibration {
    /// `proportional` or `q=<elasticity>`.
    pub label: String,
    pub q: Option<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub delta: f64,
    /// No-trade band half-width (proportional only).
    pub band: Option<f64>,
    /// Turnover implied by the closed-form identities.
    pub analytic_turnover: f64,
    /// Stationary standard deviation of the state.
    pub stationary_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratedParams {
    pub market: MarketData,
    pub ratio: f64,
    pub gamma_bar: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub entries: Vec<CostCalibration>,
    pub canonical_stats: Vec<CanonicalStats>,
}

/// Elasticities of the default calibration ladder.
pub const LADDER: [f64; 3] = [2.0, 1.5, 1.125];

/// Full ladder: proportional costs plus one entry per elasticity in `qs`.
/// `q = 2` uses the closed forms; other elasticities run in parallel
/// through the canonical equation.
pub fn calibrate_ladder(data: &MarketData, ratio: f64, qs: &[f64]) -> Result<CalibratedParams> {
    use rayon::prelude::*;
    data.validate()?;
    let gamma_bar = calibrate_frictionless(data)?;
    let g = split_risk_aversion(gamma_bar, ratio)?;
    let prop = calibrate_proportional(data, &g)?;
    let target_std = prop.band / 3f64.sqrt();
    let gs2 = g.half() * data.sigma.powi(2);
    let mut entries = vec![CostCalibration {
        label: "proportional".into(),
        q: None,
        lambda: data.lambda1,
        beta: prop.beta,
        delta: prop.delta,
        band: Some(prop.band),
        analytic_turnover: prop.delta * prop.delta / (2.0 * prop.band),
        stationary_std: target_std,
    }];
    let results: Vec<Result<(PowerCalibration, CanonicalStats)>> = qs
        .par_iter()
        .map(|&q| {
            if q == 2.0 {
                let c = calibrate_quadratic(data, &g, target_std)?;
                let st = CanonicalStats { q: 2.0, c_tilde: 1.0 / (2.0 * PI).sqrt(), v_tilde: 1.0 };
                Ok((c, st))
            } else {
                let (_, st) = canonical_for_stats(q, CANONICAL_SPACING)?;
                Ok((calibrate_power_with(data, &g, &st)?, st))
            }
        })
        .collect();
    let mut stats = Vec::new();
    for r in results {
        let (c, st) = r?;
        let (turnover, std) = power_identities(&c, &st, gs2);
        entries.push(CostCalibration {
            label: format!("q={}", c.q),
            q: Some(c.q),
            lambda: c.lambda,
            beta: c.beta,
            delta: c.delta,
            band: None,
            analytic_turnover: turnover,
            stationary_std: std,
        });
        stats.push(st);
    }
    Ok(CalibratedParams {
        market: *data,
        ratio,
        gamma_bar,
        gamma1: g.gamma1,
        gamma2: g.gamma2,
        entries,
        canonical_stats: stats,
    })
}

/// Turnover `c c~ delta^2` and stationary std `sqrt(v~) / c` implied by the
/// rescaling, where `c` is the argument scale of the canonical solution.
pub fn power_identities(c: &PowerCalibration, st: &CanonicalStats, gamma_sigma2: f64) -> (f64, f64) {
    let (_, scale) = crate::equilibrium_ode::rescale_constants(c.q, c.lambda, gamma_sigma2, c.delta * c.delta);
    (scale * st.c_tilde * c.delta * c.delta, st.v_tilde.sqrt() / scale)
}

impl CalibratedParams {
    pub fn risk_aversions(&self) -> RiskAversions {
        RiskAversions { gamma1: self.gamma1, gamma2: self.gamma2 }
    }

    pub fn entry(&self, label: &str) -> Option<&CostCalibration> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Entry for elasticity `q`, or the proportional entry for `None`.
    pub fn entry_for(&self, q: Option<f64>) -> Option<&CostCalibration> {
        self.entries.iter().find(|e| e.q == q)
    }

    pub fn model_params(&self, entry: &CostCalibration) -> Result<ModelParams> {
        agents(&self.market, &self.risk_aversions(), entry.beta)
    }

    pub fn stats_for(&self, q: f64) -> Option<&CanonicalStats> {
        self.canonical_stats.iter().find(|s| s.q == q)
    }

    /// Flat `key=value` report, one quantity per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: f64| out.push_str(&format!("{k}={v:.6e}\n"));
        let m = &self.market;
        kv("market.sigma", m.sigma);
        kv("market.mu_bar", m.mu_bar);
        kv("market.s", m.s);
        kv("market.sh_tu", m.sh_tu);
        kv("market.lambda1", m.lambda1);
        kv("market.ratio", self.ratio);
        kv("gamma_bar", self.gamma_bar);
        kv("gamma1", self.gamma1);
        kv("gamma2", self.gamma2);
        for e in &self.entries {
            let p = e.label.replace('=', "");
            kv(&format!("{p}.lambda"), e.lambda);
            kv(&format!("{p}.beta"), e.beta);
            kv(&format!("{p}.delta"), e.delta);
            if let Some(l) = e.band {
                kv(&format!("{p}.band"), l);
            }
            kv(&format!("{p}.analytic_turnover"), e.analytic_turnover);
            kv(&format!("{p}.stationary_std"), e.stationary_std);
        }
        for s in &self.canonical_stats {
            kv(&format!("canonical.q{}.c_tilde", s.q), s.c_tilde);
            kv(&format!("canonical.q{}.v_tilde", s.q), s.v_tilde);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a / b - 1.0).abs()
    }

    #[test]
    fn frictionless_values() {
        let d = MarketData::reference();
        let gb = calibrate_frictionless(&d).unwrap();
        assert!(rel(gb, 8.31e-14) < 0.01, "{gb:e}");
        let d2 = MarketData { mu_bar: 2.0 * d.mu_bar, ..d };
        assert!(rel(calibrate_frictionless(&d2).unwrap(), 2.0 * gb) < 1e-15);
        let d0 = MarketData { mu_bar: 0.0, ..d };
        assert!(matches!(calibrate_frictionless(&d0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn split_values() {
        let g = split_risk_aversion(8.31e-14, 2.0).unwrap();
        assert!(rel(g.gamma1, 1.25e-13) < 0.01 && rel(g.gamma2, 2.5e-13) < 0.01);
        let h = g.gamma1 * g.gamma2 / (g.gamma1 + g.gamma2);
        assert!(rel(h, 8.31e-14) < 1e-14);
        let e = split_risk_aversion(3e-14, 1.0).unwrap();
        assert!(rel(e.gamma1, 6e-14) < 1e-15 && e.gamma1 == e.gamma2);
        assert!(split_risk_aversion(1e-13, 0.0).is_err());
    }

    #[test]
    fn proportional_and_quadratic_from_reference() {
        let d = MarketData::reference();
        let g = split_risk_aversion(calibrate_frictionless(&d).unwrap(), 2.0).unwrap();
        let p = calibrate_proportional(&d, &g).unwrap();
        assert!(rel(p.beta, 2.57e10) < 0.02);
        assert!(rel(p.band, 5.08e10) < 0.02);
        let quad = calibrate_quadratic(&d, &g, p.band / 3f64.sqrt()).unwrap();
        assert!(rel(quad.lambda, 1.08e-10) < 0.02);
        assert!(rel(quad.beta, 2.19e10) < 0.02);
        let t = quadratic_turnover(&g, d.sigma, quad.lambda, quad.beta);
        assert!(rel(t, d.sh_tu) < 1e-10);
        let tiny = MarketData { sh_tu: 1e-3, ..d };
        assert!(calibrate_proportional(&tiny, &g).unwrap().beta < 1e-3 * p.beta);
    }

    #[test]
    fn ingest_small_file() {
        let text = "date,price,volume,shares_outstanding\n2020-01-01,100,10,5\n2020-01-02,101,20,6\n2020-01-03,102,30,7\n";
        let d = ingest_reader(text.as_bytes()).unwrap();
        assert_eq!(d.mu_bar, 1.0);
        assert_eq!(d.sigma, 0.0);
        assert_eq!(d.sh_tu, 20.0);
        assert_eq!(d.s, 7.0);
        assert!(matches!(ingest_reader("".as_bytes()), Err(Error::InsufficientData(_))));
        let one = "date,price,volume,shares_outstanding\n2020-01-01,100,10,5\n";
        assert!(matches!(ingest_reader(one.as_bytes()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ingest_reports_bad_line() {
        let text = "date,price,volume,shares_outstanding\n2020-01-01,100,10,5\n2020-01-02,abc,20,6\n";
        match ingest_reader(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
