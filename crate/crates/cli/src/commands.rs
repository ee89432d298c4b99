use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use eqlib::calibration::{
    self, calibrate_frictionless, calibrate_ladder, calibrate_power, calibrate_proportional, calibrate_quadratic,
    ingest_timeseries, split_risk_aversion, MarketData, RiskAversions, LADDER,
};
use eqlib::deep_fbsde::{
    correction_paths, evaluate, extract_decoupling_field, net::NetShape, report, Dividend, FbsdeConfig, Trainer, VolMode,
};
use eqlib::equilibrium_ode::{proportional_band, proportional_g, rescale_constants, solve_g_auto};
use eqlib::simulator::{equilibrium_returns, simulate_reflected, simulate_smooth, stationary_density, turnover_stats, SimConfig};
use eqlib::{CostSpec, ModelParams, PowerTerm};

use crate::config::{Config, Source};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    SolveOde,
    Simulate,
    Calibrate,
    TrainFbsde,
    Density,
}

/// Writes artifacts into one directory, each prefixed by the provenance line.
pub struct Artifacts {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, config_hash: &str, seed: u64) -> Result<Artifacts, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Artifacts { dir: dir.to_path_buf(), header: format!("eqlib config_hash={config_hash} seed={seed}"), written: Vec::new() })
    }

    /// Comment text the library writers put after `# `.
    pub fn header(&self) -> &str {
        &self.header
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>, Option<&str>) -> eqlib::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf, Some(&self.header))?;
        self.write_bytes(name, &buf)
    }

    fn write_text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let text = format!("# {}\n{body}", self.header);
        self.write_bytes(name, text.as_bytes())
    }

    pub fn into_paths(self) -> Vec<PathBuf> {
        self.written
    }
}

/// Market, agents and cost resolved from the configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub data: MarketData,
    pub gamma_bar: f64,
    pub risk: RiskAversions,
    pub spec: CostSpec,
    pub params: ModelParams,
}

fn market(cfg: &Config) -> Result<MarketData, CliError> {
    let series = cfg.opt_str("market.timeseries");
    let mut d = match series {
        Some(p) => {
            let d = ingest_timeseries(p)?;
            log::info!("ingested {p}: sigma={:e} mu_bar={:e} sh_tu={:e}", d.sigma, d.mu_bar, d.sh_tu);
            d
        }
        None => MarketData::reference(),
    };
    // Ingested values win over schema defaults but not over explicit keys.
    let pick = |key: &str| {
        cfg.entry(key)
            .filter(|e| series.is_none() || e.source != Source::Default)
            .and_then(|e| e.value.as_float())
    };
    let fields: [(&str, &mut f64); 6] = [
        ("market.sigma", &mut d.sigma),
        ("market.mu_bar", &mut d.mu_bar),
        ("market.s", &mut d.s),
        ("market.sh_tu", &mut d.sh_tu),
        ("market.price_level", &mut d.price_level),
        ("market.lambda1", &mut d.lambda1),
    ];
    for (key, slot) in fields {
        if let Some(v) = pick(key) {
            *slot = v;
        }
    }
    d.validate()?;
    Ok(d)
}

fn risk_aversions(cfg: &Config, gamma_bar: f64) -> Result<RiskAversions, CliError> {
    match (cfg.opt_f64("agents.gamma1"), cfg.opt_f64("agents.gamma2")) {
        (Some(gamma1), Some(gamma2)) => Ok(RiskAversions { gamma1, gamma2 }),
        (None, None) => {
            let g = split_risk_aversion(gamma_bar, cfg.f64("agents.ratio"))?;
            log::info!("derived agents.gamma1 = {:e}, agents.gamma2 = {:e}", g.gamma1, g.gamma2);
            Ok(g)
        }
        _ => Err(CliError::Config("agents.gamma1 and agents.gamma2 must be set together".into())),
    }
}

const COST_KINDS: [&str; 3] = ["power", "proportional", "composite"];

/// Calibrated `(lambda, beta)` for a single power or proportional cost.
fn calibrated(data: &MarketData, g: &RiskAversions, q: Option<f64>) -> Result<(f64, f64), CliError> {
    let prop = calibrate_proportional(data, g)?;
    Ok(match q {
        None => (data.lambda1, prop.beta),
        Some(q) if q == 2.0 => {
            let c = calibrate_quadratic(data, g, prop.band / 3f64.sqrt())?;
            (c.lambda, c.beta)
        }
        Some(q) => {
            let c = calibrate_power(data, g, q, data.lambda1)?;
            (c.lambda, c.beta)
        }
    })
}

pub fn setup(cfg: &Config) -> Result<Setup, CliError> {
    let data = market(cfg)?;
    let gamma_bar = calibrate_frictionless(&data)?;
    let risk = risk_aversions(cfg, gamma_bar)?;
    let kind = cfg.str("cost.kind");
    let lambda = cfg.opt_f64("cost.lambda");
    let beta = cfg.opt_f64("agents.beta");
    let q = match kind {
        "power" => Some(cfg.f64("cost.q")),
        "proportional" | "composite" => None,
        other => {
            let near = COST_KINDS.iter().min_by_key(|s| strsim::levenshtein(other, s)).unwrap();
            return Err(CliError::Config(format!("cost.kind `{other}` is not one of power, proportional, composite (nearest `{near}`)")));
        }
    };
    let (spec, beta) = if kind == "composite" {
        let terms = cfg
            .terms("cost.terms")
            .ok_or_else(|| CliError::Config("cost.kind = \"composite\" needs cost.terms".into()))?;
        let beta = beta.ok_or_else(|| CliError::Config("composite costs are not calibrated; set agents.beta".into()))?;
        let terms = terms.into_iter().map(|(q, lambda)| PowerTerm { q, lambda }).collect();
        (CostSpec::composite(terms)?, beta)
    } else {
        let (lambda, beta) = match (lambda, beta) {
            (Some(l), Some(b)) => (l, b),
            (l, b) => {
                let (cl, cb) = calibrated(&data, &risk, q)?;
                let l = l.unwrap_or_else(|| {
                    log::info!("derived cost.lambda = {cl:e}");
                    cl
                });
                let b = b.unwrap_or_else(|| {
                    log::info!("derived agents.beta = {cb:e}");
                    cb
                });
                (l, b)
            }
        };
        let spec = match q {
            Some(q) => CostSpec::power(q, lambda)?,
            None => CostSpec::proportional(lambda)?,
        };
        (spec, beta)
    };
    let frictionless = data.s * risk.gamma2 / risk.sum();
    let params = ModelParams::new(risk.gamma1, risk.gamma2, data.sigma, beta, -beta, data.s, frictionless + cfg.f64("agents.x0"))?;
    Ok(Setup { data, gamma_bar, risk, spec, params })
}

/// Seed recorded in the artifact headers of `command`.
pub fn command_seed(cfg: &Config, command: Command) -> u64 {
    match command {
        Command::TrainFbsde => cfg.u64("fbsde.seed"),
        _ => cfg.u64("sim.seed"),
    }
}

fn proportional_lambda(spec: &CostSpec) -> Option<f64> {
    match spec {
        CostSpec::Proportional { lambda } => Some(*lambda),
        _ => None,
    }
}

fn kv(out: &mut String, key: &str, v: impl std::fmt::Display) {
    out.push_str(&format!("{key}={v}\n"));
}

pub fn run(command: Command, cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    art.write_text("config.txt", &cfg.echo())?;
    match command {
        Command::Calibrate => run_calibrate(cfg, art),
        Command::SolveOde => run_solve_ode(cfg, art),
        Command::Simulate => run_simulate(cfg, art),
        Command::Density => run_density(cfg, art),
        Command::TrainFbsde => run_train(cfg, art),
    }
}

fn run_calibrate(cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    let data = market(cfg)?;
    let ladder = calibrate_ladder(&data, cfg.f64("agents.ratio"), &LADDER)?;
    for e in &ladder.entries {
        let rel = (e.analytic_turnover / data.sh_tu - 1.0).abs();
        if rel > 1e-9 {
            return Err(eqlib::Error::Numeric(format!("{} turnover identity off by {rel:e}", e.label)).into());
        }
    }
    art.write_text("calibration.txt", &ladder.to_key_value())
}

fn run_solve_ode(cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let sol = match proportional_lambda(&s.spec) {
        Some(l) => proportional_g(&s.params, l)?.0,
        None => solve_g_auto(&s.spec, &s.params, cfg.usize("ode.grid_n"))?,
    };
    sol.check_shape()?;
    for w in &sol.warnings {
        log::warn!("{w}");
    }
    let law = sol.stationary_law()?;
    art.write_with("g_table.csv", |w, c| sol.write_csv(w, c))?;
    let mut out = String::new();
    kv(&mut out, "kind", format!("{:?}", sol.kind));
    kv(&mut out, "b_f", format!("{:e}", sol.b_f));
    kv(&mut out, "x_max", format!("{:e}", sol.x_max()));
    kv(&mut out, "growth_ratio_at_xmax", format!("{:e}", sol.growth_ratio_at_xmax));
    kv(&mut out, "ode_residual", format!("{:e}", sol.ode_residual()));
    kv(&mut out, "stationary_std", format!("{:e}", law.std));
    kv(&mut out, "mean_turnover", format!("{:e}", law.mean_turnover));
    if let Some(l) = sol.band {
        kv(&mut out, "band", format!("{l:e}"));
    }
    art.write_text("ode_summary.txt", &out)
}

fn run_simulate(cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let sim = SimConfig {
        horizon_days: cfg.f64("sim.horizon_days"),
        dt: cfg.f64("sim.dt"),
        n_paths: cfg.usize("sim.n_paths"),
        seed: cfg.u64("sim.seed"),
        antithetic: cfg.bool("sim.antithetic"),
        record_every: cfg.usize("sim.record_every"),
    };
    sim.n_steps()?;
    let paths = match proportional_lambda(&s.spec) {
        Some(l) => {
            let p = simulate_reflected(&s.params, l, &sim)?;
            let band = proportional_band(&s.params, l)?;
            if let Some(x) = p.x.iter().find(|x| x.abs() > band * (1.0 + 1e-12)) {
                return Err(eqlib::Error::Numeric(format!("reflected state {x:e} left the band {band:e}")).into());
            }
            p
        }
        None => {
            let ode = solve_g_auto(&s.spec, &s.params, cfg.usize("ode.grid_n"))?;
            simulate_smooth(&ode, &s.params, &sim)?
        }
    };
    art.write_with("paths.csv", |w, c| paths.write_csv(w, c))?;
    let stats = turnover_stats(&paths, cfg.usize("sim.max_lag"))?;
    let mu = equilibrium_returns(&paths, &s.params);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let mut out = String::new();
    kv(&mut out, "mean_daily_turnover", format!("{:e}", stats.mean_daily));
    kv(&mut out, "mean_daily_turnover_from_totals", format!("{:e}", stats.mean_from_totals));
    kv(&mut out, "turnover_std_error", format!("{:e}", stats.std_error));
    kv(&mut out, "std_daily_turnover", format!("{:e}", stats.std_daily));
    let ac: Vec<String> = stats.autocorrelations.iter().map(|a| format!("{a:.6}")).collect();
    kv(&mut out, "turnover_autocorrelations", ac.join(" "));
    kv(&mut out, "state_std", format!("{:e}", sd(&paths.x)));
    kv(&mut out, "mean_return", format!("{:e}", mean(&mu)));
    kv(&mut out, "std_return", format!("{:e}", sd(&mu)));
    kv(&mut out, "frictionless_return", format!("{:e}", s.gamma_bar * s.data.s * s.data.sigma.powi(2)));
    art.write_text("simulate_summary.txt", &out)
}

fn run_density(cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let n = cfg.usize("ode.density_points");
    if n < 2 {
        return Err(CliError::Config("ode.density_points must be at least 2".into()));
    }
    let width = cfg.f64("ode.density_std");
    let linspace = |h: f64| -> Vec<f64> { (0..n).map(|i| -h + 2.0 * h * i as f64 / (n - 1) as f64).collect() };
    let mut out = String::new();
    match &s.spec {
        CostSpec::Proportional { lambda } => {
            let l = proportional_band(&s.params, *lambda)?;
            let grid = linspace(width * l / 3f64.sqrt());
            art.write_text(
                "density.csv",
                &std::iter::once("x,nu\n".to_string())
                    .chain(grid.iter().map(|&x| format!("{x:.12e},{:.12e}\n", if x.abs() <= l { 0.5 / l } else { 0.0 })))
                    .collect::<String>(),
            )?;
            kv(&mut out, "kind", "uniform");
            kv(&mut out, "band", format!("{l:e}"));
        }
        spec => {
            let (q, lambda) = spec
                .single_power()
                .ok_or_else(|| CliError::Config("density needs a single power cost or proportional costs".into()))?;
            let (canonical, stats) = calibration::canonical_for_stats(q, calibration::CANONICAL_SPACING)?;
            let delta = s.params.delta();
            let (_, c) = rescale_constants(q, lambda, s.params.gamma_sigma2(), delta * delta);
            let std = stats.v_tilde.sqrt() / c;
            let d = stationary_density(&canonical, q, lambda, &s.params, &linspace(width * std))?;
            art.write_with("density.csv", |w, c| d.write_csv(w, c))?;
            kv(&mut out, "kind", format!("q={q}"));
            kv(&mut out, "stationary_std", format!("{std:e}"));
            kv(&mut out, "mass", format!("{:e}", d.mass));
            kv(&mut out, "variance", format!("{:e}", d.variance));
            kv(&mut out, "analytic_variance", format!("{:e}", d.analytic_variance));
        }
    }
    art.write_text("density_summary.txt", &out)
}

fn fbsde_config(cfg: &Config, s: &Setup) -> Result<FbsdeConfig, CliError> {
    let mode = match cfg.str("fbsde.mode") {
        "exogenous_vol" => VolMode::ExogenousVol,
        "endogenous_vol" => VolMode::EndogenousVol,
        other => return Err(CliError::Config(format!("fbsde.mode `{other}` is not exogenous_vol or endogenous_vol"))),
    };
    let horizon = cfg.f64("fbsde.horizon");
    let a = cfg.opt_f64("fbsde.dividend_a").unwrap_or(s.data.sigma);
    let b = cfg
        .opt_f64("fbsde.dividend_b")
        .unwrap_or_else(|| s.data.price_level / horizon + s.data.s * s.gamma_bar * a * a);
    let mut f = FbsdeConfig::new(mode, s.spec.clone(), s.params, Dividend { a, b });
    f.horizon = horizon;
    f.n_steps = cfg.usize("fbsde.n_steps");
    f.batch_size = cfg.usize("fbsde.batch_size");
    f.learning_rate = cfg.f64("fbsde.learning_rate");
    f.n_iterations = cfg.usize("fbsde.n_iterations");
    f.lr_decay_every = cfg.usize("fbsde.lr_decay_every");
    f.lr_decay = cfg.f64("fbsde.lr_decay");
    f.clip_norm = cfg.f64("fbsde.clip_norm");
    f.bn_momentum = cfg.f64("fbsde.bn_momentum");
    f.bn_eps = cfg.f64("fbsde.bn_eps");
    f.rate_cap = cfg.f64("fbsde.rate_cap");
    f.sigma_head_scale = cfg.f64("fbsde.sigma_head_scale");
    f.seed = cfg.u64("fbsde.seed");
    f.shape = NetShape { n1: cfg.usize("fbsde.n1"), n2: cfg.usize("fbsde.n2"), batch_norm: cfg.bool("fbsde.batch_norm") };
    f.validate()?;
    Ok(f)
}

fn run_train(cfg: &Config, art: &mut Artifacts) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let f = fbsde_config(cfg, &s)?;
    let days = cfg.opt_f64("fbsde.field_days_to_maturity").unwrap_or(0.5 * f.horizon);
    let t_index = f.step_at_days_to_maturity(days)?;
    let log_every = cfg.usize("fbsde.log_every").max(1);
    let mut tr = Trainer::new(f.clone())?;
    while tr.history.len() < f.n_iterations {
        match tr.step() {
            Ok(r) if r.iteration % log_every == 0 => log::info!("iteration {} loss {:e}", r.iteration, r.loss),
            Ok(_) => {}
            Err(e) => {
                art.write_with("history.csv", |w, c| report::write_history(w, &tr.history, c))?;
                return Err(e.into());
            }
        }
    }
    art.write_with("history.csv", |w, c| report::write_history(w, &tr.history, c))?;
    let n_test = cfg.usize("fbsde.n_test");
    let ev = evaluate(&f, &tr.coeffs, &tr.nets, n_test.max(1), f.seed)?;
    if !(ev.y_term.is_finite() && ev.s_term.is_finite()) {
        return Err(eqlib::Error::Divergence { iteration: f.n_iterations, step: f.n_steps, detail: "non-finite out-of-sample loss".into() }.into());
    }
    let field = extract_decoupling_field(&f, &tr.coeffs, &tr.scaling, &tr.nets, t_index, n_test, f.seed)?;
    art.write_with("field.csv", |w, c| report::write_field(w, &field, c))?;
    if f.mode == VolMode::EndogenousVol {
        let rows = correction_paths(&f, &tr.coeffs, &tr.nets, cfg.usize("fbsde.n_correction_paths"), f.seed)?;
        art.write_with("corrections.csv", |w, c| report::write_corrections(w, &rows, c))?;
    }
    let mut body = report::summary(&f, &tr.scaling, &ev, tr.clip_events);
    kv(&mut body, "field.days_to_maturity", days);
    kv(&mut body, "field.t_index", t_index);
    art.write_text("summary.txt", &body)
}

/// Parses the configuration, applies the seed override and runs `command`.
pub fn execute(command: Command, config: &Path, out: &Path, seed: Option<u64>, sets: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut overrides = sets.to_vec();
    if let Some(seed) = seed {
        overrides.push(format!("sim.seed={seed}"));
        overrides.push(format!("fbsde.seed={seed}"));
    }
    let cfg = Config::from_file(config, &overrides)?;
    let mut art = Artifacts::new(out, &cfg.hash(), command_seed(&cfg, command))?;
    run(command, &cfg, &mut art)?;
    let paths = art.into_paths();
    let mut so = std::io::stdout().lock();
    for p in &paths {
        writeln!(so, "wrote {}", p.display())?;
    }
    Ok(paths)
}
