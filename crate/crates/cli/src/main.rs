//! `csvortex` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 an identity
//! check failed, 3 solver failure, 4 infeasible or out-of-regime problem.

mod commands;
mod config;
mod output;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "csvortex", version, about = "Bilayer Chern-Simons vortex solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Doubly periodic solve on the configured torus.
    SolveTorus(RunArgs),
    /// Bounded solve on the configured disk or rectangle, through the regularization schedule.
    SolveDisk(RunArgs),
    /// Full-plane approximation by disk continuation.
    SolveFullplane(RunArgs),
    /// Single Liouville-type equation obtained when both layers coincide.
    SolveSingle(RunArgs),
    /// Feasibility and solvability across the torus existence threshold.
    SweepThreshold(RunArgs),
    /// Re-check identities on fields written by a previous solve.
    Diagnose(RunArgs),
    /// Built-in smoke tests; needs no configuration.
    Selftest {
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the file is read; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Solver(#[from] csvortex::Error),
}

impl RunError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RunError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        use csvortex::Error as E;
        match self {
            RunError::Config(_) | RunError::Usage(_) | RunError::Input(_) | RunError::Io(_) => 1,
            RunError::Solver(E::Infeasible { .. } | E::RegimeBFullPlane { .. }) => 4,
            RunError::Solver(E::OutOfScopeRegime { .. } | E::InvalidParameter(_)) => 1,
            RunError::Solver(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Selftest { quiet } => Ok(selftest::run(quiet)),
        Command::SolveTorus(a) => commands::dispatch(commands::Kind::Torus, &a),
        Command::SolveDisk(a) => commands::dispatch(commands::Kind::Disk, &a),
        Command::SolveFullplane(a) => commands::dispatch(commands::Kind::FullPlane, &a),
        Command::SolveSingle(a) => commands::dispatch(commands::Kind::Single, &a),
        Command::SweepThreshold(a) => commands::dispatch(commands::Kind::Sweep, &a),
        Command::Diagnose(a) => commands::dispatch(commands::Kind::Diagnose, &a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
