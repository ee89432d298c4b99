use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. The CLI maps these to coarse
/// categories through [`Error::category`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("operation `{op}` requires a smooth cost, got proportional")]
    UnsupportedKind { op: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("assumption check failed ({clause}): {detail}")]
    Validation { clause: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bracket error: {0}")]
    Bracket(String),

    #[error("integrator blow-up near x = {last_good_x:e}: {detail}")]
    Solver { last_good_x: f64, detail: String },

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("endowment volatilities give delta = 0; the equilibrium is frictionless and needs no ODE")]
    DegenerateEndowment,

    #[error("grid resolution: {0}")]
    Resolution(String),

    #[error("state left the ODE grid at x = {x:e} (grid half-width {x_max:e}); increase x_max")]
    Extension { x: f64, x_max: f64 },

    #[error("quadrature: {0}")]
    Quadrature(String),

    #[error("tail not converged: integrand {value:e} at grid end {x_end}; extend the grid")]
    TailNotConverged { x_end: f64, value: f64 },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate calibration: {0}")]
    Degenerate(String),

    #[error("batch normalization needs at least two samples in training mode")]
    BatchNorm,

    #[error("divergence at iteration {iteration}, step {step}: {detail}")]
    Divergence {
        iteration: usize,
        step: usize,
        detail: String,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("io: {0}")]
    Io(String),
}

/// Coarse grouping used for exit codes and one-line error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Numeric,
    Divergence,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Numeric => "numeric",
            Category::Divergence => "divergence",
            Category::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        use Error::*;
        match self {
            UnsupportedKind { .. }
            | Domain(_)
            | InvalidParam(_)
            | Validation { .. }
            | DegenerateEndowment
            | Parse { .. }
            | InsufficientData(_)
            | Degenerate(_) => Category::Config,
            Divergence { .. } => Category::Divergence,
            Io(_) => Category::Io,
            _ => Category::Numeric,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.position() {
            Some(p) => Error::Parse {
                line: p.line() as usize,
                detail: e.to_string(),
            },
            None => Error::Io(e.to_string()),
        }
    }
}
