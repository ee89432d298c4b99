//! Run configuration: `key = value` lines grouped by `[section]` headers or
//! written with dotted keys (`cost.q = 1.5`). Values use TOML literal
//! syntax (strings may also be bare words) and composite cost terms are
//! arrays of `[q, lambda]` pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Float,
    Int,
    Bool,
    Str,
    /// Array of `[q, lambda]` pairs.
    Terms,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Float => "a number",
            Kind::Int => "a non-negative integer",
            Kind::Bool => "true or false",
            Kind::Str => "a string",
            Kind::Terms => "an array of [q, lambda] pairs",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Fallback {
    /// TOML literal applied when the key is absent.
    Value(&'static str),
    /// Computed from other settings when absent; the text says how.
    Derived(&'static str),
    /// Optional, no value when absent.
    Unset,
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub fallback: Fallback,
}

const fn k(key: &'static str, kind: Kind, fallback: Fallback) -> KeySpec {
    KeySpec { key, kind, fallback }
}

use Fallback::{Derived, Unset, Value as V};
use Kind::*;

pub const SECTIONS: [&str; 6] = ["market", "agents", "cost", "ode", "sim", "fbsde"];

pub static SCHEMA: &[KeySpec] = &[
    k("market.sigma", Float, V("1.88")),
    k("market.mu_bar", Float, V("0.072")),
    k("market.s", Float, V("2.46e11")),
    k("market.sh_tu", Float, V("1.84e9")),
    k("market.price_level", Float, V("124.11")),
    k("market.lambda1", Float, V("0.31")),
    k("market.timeseries", Str, Unset),
    k("agents.ratio", Float, V("2.0")),
    k("agents.gamma1", Float, Derived("gamma_bar (1 + ratio) / ratio")),
    k("agents.gamma2", Float, Derived("ratio * gamma1")),
    k("agents.beta", Float, Derived("calibrated to turnover for the cost")),
    k("agents.x0", Float, V("0.0")),
    k("cost.kind", Str, V("\"power\"")),
    k("cost.q", Float, V("2.0")),
    k("cost.lambda", Float, Derived("calibrated to turnover, or market.lambda1 for proportional")),
    k("cost.terms", Terms, Unset),
    k("ode.grid_n", Int, V("16001")),
    k("ode.density_points", Int, V("801")),
    k("ode.density_std", Float, V("5.0")),
    k("sim.horizon_days", Float, V("2500.0")),
    k("sim.dt", Float, V("0.0625")),
    k("sim.n_paths", Int, V("64")),
    k("sim.seed", Int, V("0")),
    k("sim.antithetic", Bool, V("false")),
    k("sim.record_every", Int, V("16")),
    k("sim.max_lag", Int, V("20")),
    k("fbsde.mode", Str, V("\"exogenous_vol\"")),
    k("fbsde.horizon", Float, V("20.0")),
    k("fbsde.n_steps", Int, V("40")),
    k("fbsde.batch_size", Int, V("128")),
    k("fbsde.learning_rate", Float, V("2e-3")),
    k("fbsde.n_iterations", Int, V("8000")),
    k("fbsde.lr_decay_every", Int, V("2000")),
    k("fbsde.lr_decay", Float, V("0.5")),
    k("fbsde.clip_norm", Float, V("10.0")),
    k("fbsde.bn_momentum", Float, V("0.99")),
    k("fbsde.bn_eps", Float, V("1e-3")),
    k("fbsde.rate_cap", Float, V("100.0")),
    k("fbsde.sigma_head_scale", Float, V("0.1")),
    k("fbsde.n1", Int, V("15")),
    k("fbsde.n2", Int, V("15")),
    k("fbsde.batch_norm", Bool, V("true")),
    k("fbsde.seed", Int, V("0")),
    k("fbsde.dividend_a", Float, Derived("market.sigma")),
    k("fbsde.dividend_b", Float, Derived("price_level / horizon + s gamma_bar a^2")),
    k("fbsde.n_test", Int, V("65536")),
    k("fbsde.field_days_to_maturity", Float, Derived("half the horizon")),
    k("fbsde.n_correction_paths", Int, V("4")),
    k("fbsde.log_every", Int, V("1000")),
];

pub fn spec_of(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Closest schema key by edit distance.
pub fn nearest_key(key: &str) -> &'static str {
    SCHEMA
        .iter()
        .min_by_key(|s| strsim::levenshtein(key, s.key))
        .map(|s| s.key)
        .unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(usize),
    Override,
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: Value,
    pub source: Source,
}

/// Parsed configuration with every literal default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

fn parse_value(raw: &str, spec: &KeySpec, at: &str) -> Result<Value, CliError> {
    let bad = |detail: String| CliError::Config(format!("{at}: `{}` expects {}: {detail}", spec.key, spec.kind.describe()));
    // Bare words are accepted for string keys (`mode = endogenous_vol`, paths).
    let bare = raw.trim();
    if spec.kind == Str && !bare.is_empty() && !bare.starts_with(['"', '\'']) {
        return Ok(Value::String(bare.to_string()));
    }
    let table: toml::Table = toml::from_str(&format!("v = {raw}")).map_err(|_| bad(format!("cannot parse `{}`", raw.trim())))?;
    let v = table.get("v").cloned().ok_or_else(|| bad("empty value".into()))?;
    let type_name = v.type_str();
    match (spec.kind, v) {
        (Float, Value::Float(f)) => Ok(Value::Float(f)),
        (Float, Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Int, Value::Integer(i)) if i >= 0 => Ok(Value::Integer(i)),
        (Bool, Value::Boolean(b)) => Ok(Value::Boolean(b)),
        (Str, Value::String(s)) => Ok(Value::String(s)),
        (Terms, Value::Array(a)) => {
            let ok = !a.is_empty()
                && a.iter().all(|t| {
                    matches!(t, Value::Array(p) if p.len() == 2 && p.iter().all(|x| x.as_float().or(x.as_integer().map(|i| i as f64)).is_some()))
                });
            if ok {
                Ok(Value::Array(a))
            } else {
                Err(bad("each term must be [q, lambda]".into()))
            }
        }
        _ => Err(bad(format!("got {type_name} `{}`", raw.trim()))),
    }
}

/// Drops a trailing `#` comment that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn lookup(key: &str, at: &str) -> Result<&'static KeySpec, CliError> {
    spec_of(key).ok_or_else(|| CliError::Config(format!("{at}: unknown key `{key}`, nearest valid key is `{}`", nearest_key(key))))
}

impl Config {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Parses file text, then applies `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Config, CliError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let at = format!("line {line_no}");
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    let near = SECTIONS.iter().min_by_key(|s| strsim::levenshtein(name, s)).unwrap();
                    return Err(CliError::Config(format!("{at}: unknown section `{name}`, nearest valid section is `{near}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{at}: expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            let full = match &section {
                Some(s) if !key.contains('.') => format!("{s}.{key}"),
                _ => key.to_string(),
            };
            let spec = lookup(&full, &at)?;
            let value = parse_value(value, spec, &at)?;
            entries.insert(full, Entry { value, source: Source::File(line_no) });
        }
        let mut cfg = Config { entries };
        for o in overrides {
            cfg.set(o)?;
        }
        cfg.fill_defaults();
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let at = format!("--set {assignment}");
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{at}: expected key=value")))?;
        let key = key.trim();
        let spec = lookup(key, &at)?;
        let value = parse_value(value, spec, &at)?;
        self.entries.insert(key.to_string(), Entry { value, source: Source::Override });
        Ok(())
    }

    fn fill_defaults(&mut self) {
        for s in SCHEMA {
            if let Fallback::Value(lit) = s.fallback {
                if !self.entries.contains_key(s.key) {
                    let value = parse_value(lit, s, "default").expect("schema default parses");
                    log::info!("default {} = {}", s.key, lit);
                    self.entries.insert(s.key.to_string(), Entry { value, source: Source::Default });
                }
            }
        }
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        debug_assert!(spec_of(key).is_some(), "{key} is not in the schema");
        self.entries.get(key)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.entry(key).is_some()
    }

    pub fn opt_f64(&self, key: &str) -> Option<f64> {
        self.entry(key).and_then(|e| e.value.as_float())
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.opt_f64(key).unwrap_or_else(|| panic!("{key} has no value"))
    }

    pub fn usize(&self, key: &str) -> usize {
        let v = self.entry(key).and_then(|e| e.value.as_integer()).unwrap_or_else(|| panic!("{key} has no value"));
        v as usize
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.usize(key) as u64
    }

    pub fn bool(&self, key: &str) -> bool {
        self.entry(key).and_then(|e| e.value.as_bool()).unwrap_or_else(|| panic!("{key} has no value"))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.entry(key).and_then(|e| e.value.as_str())
    }

    pub fn str(&self, key: &str) -> &str {
        self.opt_str(key).unwrap_or_else(|| panic!("{key} has no value"))
    }

    /// `[q, lambda]` pairs of `cost.terms`.
    pub fn terms(&self, key: &str) -> Option<Vec<(f64, f64)>> {
        let num = |v: &Value| v.as_float().or(v.as_integer().map(|i| i as f64)).unwrap();
        self.entry(key).and_then(|e| e.value.as_array()).map(|a| {
            a.iter()
                .map(|t| {
                    let p = t.as_array().unwrap();
                    (num(&p[0]), num(&p[1]))
                })
                .collect()
        })
    }

    /// Resolved settings, one `key = value` line each, sorted by key.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, e) in &self.entries {
            writeln!(s, "{k} = {}", e.value).unwrap();
        }
        s
    }

    /// Config echo annotated with the origin of every value.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, e) in &self.entries {
            let origin = match e.source {
                Source::File(l) => format!("file line {l}"),
                Source::Override => "--set".to_string(),
                Source::Default => "default".to_string(),
            };
            writeln!(s, "{k} = {}  # {origin}", e.value).unwrap();
        }
        s
    }

    /// SHA-256 of [`Config::canonical_text`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = Config::parse("[cost]\nq = 1.5\nlambda = 5.22e-6\n", &[]).unwrap();
        let b = Config::parse("cost.q = 1.5\ncost.lambda = 5.22e-6 # inline comment\n", &[]).unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.f64("cost.q"), 1.5);
    }

    #[test]
    fn integers_are_accepted_as_floats() {
        let c = Config::parse("sim.horizon_days = 100\n", &[]).unwrap();
        assert_eq!(c.f64("sim.horizon_days"), 100.0);
    }

    #[test]
    fn defaults_fill_literals_but_not_derived_keys() {
        let c = Config::parse("market.sigma = 2.0\n", &[]).unwrap();
        assert_eq!(c.entry("sim.dt").unwrap().source, Source::Default);
        assert_eq!(c.entry("market.sigma").unwrap().source, Source::File(1));
        assert!(!c.is_set("cost.lambda"));
        assert!(!c.is_set("market.timeseries"));
    }

    #[test]
    fn override_supersedes_file() {
        let c = Config::parse("cost.q = 2.0\n", &["cost.q=1.5".into()]).unwrap();
        assert_eq!(c.f64("cost.q"), 1.5);
        assert_eq!(c.entry("cost.q").unwrap().source, Source::Override);
    }

    #[test]
    fn malformed_value_names_key_and_line() {
        let e = Config::parse("\n\ncost.q = abc\n", &[]).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("cost.q"), "{e}");
        let e = Config::parse("sim.n_paths = 1.5\n", &[]).unwrap_err().to_string();
        assert!(e.contains("sim.n_paths") && e.contains("integer"), "{e}");
        let e = Config::parse("sim.antithetic = yes\n", &[]).unwrap_err().to_string();
        assert!(e.contains("sim.antithetic") && e.contains("true or false"), "{e}");
    }

    #[test]
    fn strings_may_be_bare_or_quoted() {
        let c = Config::parse("fbsde.mode = endogenous_vol\ncost.kind = \"proportional\"\n", &[]).unwrap();
        assert_eq!(c.str("fbsde.mode"), "endogenous_vol");
        assert_eq!(c.str("cost.kind"), "proportional");
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = Config::parse("cost.lamda = 1e-10\n", &[]).unwrap_err().to_string();
        assert!(e.contains("`cost.lambda`"), "{e}");
        let e = Config::parse("[simm]\n", &[]).unwrap_err().to_string();
        assert!(e.contains("`sim`"), "{e}");
    }

    #[test]
    fn terms_parse_as_pairs() {
        let c = Config::parse("cost.terms = [[2.0, 5e-11], [1.5, 2.5e-6]]\n", &[]).unwrap();
        assert_eq!(c.terms("cost.terms").unwrap(), vec![(2.0, 5e-11), (1.5, 2.5e-6)]);
        assert!(Config::parse("cost.terms = [[2.0]]\n", &[]).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = Config::parse("", &[]).unwrap();
        let b = Config::parse("", &["sim.seed=1".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn fbsde_defaults_match_the_library() {
        use eqlib::deep_fbsde::{Dividend, FbsdeConfig, VolMode};
        use eqlib::{CostSpec, ModelParams};
        let p = ModelParams::at_frictionless_start(1.0, 1.0, 1.0, 1.0, -1.0, 1.0).unwrap();
        let lib = FbsdeConfig::new(VolMode::ExogenousVol, CostSpec::power(2.0, 1.0).unwrap(), p, Dividend { a: 1.0, b: 0.0 });
        let c = Config::parse("", &[]).unwrap();
        assert_eq!(c.f64("fbsde.horizon"), lib.horizon);
        assert_eq!(c.usize("fbsde.n_steps"), lib.n_steps);
        assert_eq!(c.usize("fbsde.batch_size"), lib.batch_size);
        assert_eq!(c.f64("fbsde.learning_rate"), lib.learning_rate);
        assert_eq!(c.usize("fbsde.n_iterations"), lib.n_iterations);
        assert_eq!(c.usize("fbsde.lr_decay_every"), lib.lr_decay_every);
        assert_eq!(c.f64("fbsde.lr_decay"), lib.lr_decay);
        assert_eq!(c.f64("fbsde.clip_norm"), lib.clip_norm);
        assert_eq!(c.f64("fbsde.bn_momentum"), lib.bn_momentum);
        assert_eq!(c.f64("fbsde.bn_eps"), lib.bn_eps);
        assert_eq!(c.f64("fbsde.rate_cap"), lib.rate_cap);
        assert_eq!(c.f64("fbsde.sigma_head_scale"), lib.sigma_head_scale);
        assert_eq!((c.usize("fbsde.n1"), c.usize("fbsde.n2")), (lib.shape.n1, lib.shape.n2));
    }
}
