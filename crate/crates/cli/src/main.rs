use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eqlib_cli::{configure_threads, execute, Command};

/// Equilibrium trading with transaction costs: ODE solutions, simulation,
/// calibration and the deep FBSDE solver.
#[derive(Parser, Debug)]
#[command(name = "eqlib", version)]
struct Args {
    command: Command,
    /// Configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides both `sim.seed` and `fbsde.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one key, e.g. `--set cost.q=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = Args::parse();
    let res = configure_threads().and_then(|_| execute(args.command, &args.config, &args.out, args.seed, &args.sets));
    match res {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("eqlib error [{}] {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
