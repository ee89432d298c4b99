//! Command-line front end: configuration parsing, model assembly and
//! artifact writing for each subcommand.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{execute, Command};
pub use error::CliError;

/// Caps the global rayon pool from `EQLIB_THREADS` (unset or 0 = all cores).
pub fn configure_threads() -> Result<(), CliError> {
    let n = match std::env::var("EQLIB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("EQLIB_THREADS = `{v}` is not a count")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}
