//! Batch front door: reads a JSON run configuration and drives the
//! library end to end. Three subcommands cover the workflow: export the
//! analytic equilibrium pair, time-step the scheme to steady state, and
//! compare exported fields against oracles or each other.

mod commands;
mod config;
mod csvio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "sandtable", version, about = "Granular pile equilibria on tables with a partially open edge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the analytic equilibrium fields and print the integral reports.
    Equilibrium(RunArgs),
    /// Time-step the scheme to steady state and export the computed fields.
    Simulate(SimArgs),
    /// Compare a field file against an oracle or a second field file.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid step; overrides the config.
    #[arg(long)]
    pub h: Option<f64>,
}

#[derive(Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Run each projection region separately, cut edges acting as walls.
    #[arg(long)]
    pub decompose: bool,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Run configuration (JSON); provides geometry, oracle and exclusions.
    #[arg(long)]
    pub config: PathBuf,
    /// Field to check (CSV).
    pub field: PathBuf,
    /// Reference field (CSV); defaults to the oracle named in the config.
    pub reference: Option<PathBuf>,
}

/// Failure modes with their process exit codes: 2 for anything wrong
/// with the inputs, 3 for a blown-up run, 4 for a run that ran out of
/// steps.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("scheme unstable at step {0}; partial state exported")]
    Unstable(usize),
    #[error("run did not converge within the step budget (final rate {0:.3e})")]
    NotConverged(f64),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Unstable(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }
}

/// SANDTABLE_THREADS caps the rayon pool; unset leaves the default.
fn cap_threads() -> Result<(), CliError> {
    let Ok(val) = std::env::var("SANDTABLE_THREADS") else {
        return Ok(());
    };
    let n: usize = val
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SANDTABLE_THREADS = {val:?} is not a positive worker count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cap_threads().and_then(|()| match &cli.command {
        Command::Equilibrium(args) => commands::equilibrium(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Compare(args) => commands::compare(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sandtable: {e}");
            ExitCode::from(e.code())
        }
    }
}
