//! `voxnav`: world generation, capture, map learning and evaluation.

mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Snapshot};
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    let snapshot = match &cli.from_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Snapshot>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let command = cli.command.ok_or_else(|| CliError::Config("a subcommand or --from-config is required".into()))?;
            Snapshot { seed: cli.seed, command }
        }
    };
    configure_threads(cli.jobs)?;
    commands::execute(&snapshot)
}

/// `VOXNAV_THREADS` wins over `--jobs`.
fn configure_threads(jobs: Option<usize>) -> Result<(), CliError> {
    let threads = match std::env::var("VOXNAV_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| CliError::Config(format!("VOXNAV_THREADS must be a positive integer, got {v:?}")))?),
        Err(_) => jobs,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
