//! Command dispatch for the `pfpp` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pfpp_core::PfppError;

/// Exit statuses: 0 success, 2 configuration, 3 solver or simulation,
/// 4 residual or monotonicity gate, 5 verification.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("gate rejected the solution: {0}")]
    Gate(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) | CliError::Simulation(_) => 3,
            CliError::Gate(_) => 4,
            CliError::Verify(_) => 5,
        }
    }

    /// Classifies an engine error raised while solving.
    pub fn from_solver(e: PfppError) -> Self {
        match e {
            PfppError::ConstructionFailed(_) | PfppError::SolutionRejected(_) => {
                CliError::Gate(e.to_string())
            }
            PfppError::Config(_)
            | PfppError::Validation(_)
            | PfppError::Capacity(_)
            | PfppError::UnsupportedRoute(_) => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pfpp",
    version,
    about = "Predictable forward performance processes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Saved state from `construct`.
    #[arg(long, global = true)]
    pub state: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// RNG seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Residual tolerance; overrides the configuration.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the inverse marginals period by period and save the state.
    Construct,
    /// Simulate optimal wealth paths.
    Simulate,
    /// Check the budget, martingale and supermartingale conditions.
    Verify,
    /// Run one deconvolution solve and dump its diagnostics.
    Deconv,
    /// Summarize a saved state and tabulate its utilities.
    Report,
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Construct => commands::construct(cli),
        Command::Simulate => commands::simulate(cli),
        Command::Verify => commands::verify(cli),
        Command::Deconv => commands::deconv(cli),
        Command::Report => commands::report(cli),
    }
}
