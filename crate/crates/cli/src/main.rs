//! `inertial`: experiment runner for inertial manifold computations.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inertial_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{failed} of {total} sweep points failed")]
    Partial { failed: usize, total: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) | CliError::Csv(_) => 2,
            CliError::Core(
                CoreError::Input(_) | CoreError::Dimension { .. } | CoreError::Invariant(_) | CoreError::GapViolation { .. },
            ) => 2,
            CliError::Core(_) => 3,
            CliError::Partial { .. } => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "inertial", version, about = "Compute inertial manifolds with Householder-decoupled BVPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for sweeps (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Seed for random reflector boundary data.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Track the decoupling frame along a trajectory and estimate gap constants.
    Decouple,
    /// Solve for one point on the manifold.
    ManifoldPoint,
    /// Residual against the horizon T, one solve per (T, ŵ) pair.
    Sweep,
    /// Time-step the reduced dynamics on the manifold.
    Trajectory,
    /// Truncation bound and the smallest admissible horizon.
    Tbound,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Decouple => "decouple",
            Command::ManifoldPoint => "manifold-point",
            Command::Sweep => "sweep",
            Command::Trajectory => "trajectory",
            Command::Tbound => "tbound",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
