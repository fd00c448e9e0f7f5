//! `ldmsde`: run an analysis from a TOML config and write CSV/JSON
//! artifacts. Exit status 0 on success, 2 on usage or config errors, 1 when
//! the analysis itself fails.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Invocation;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

#[derive(Parser)]
#[command(name = "ldmsde", version, about = "Stochastic latent-dynamics analyses driven by TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Euler–Maruyama ensemble of a registered SDE.
    Simulate(Common),
    /// Fundamental matrix and epsilon or initial-value sensitivities along one path.
    Sensitivity(Common),
    /// Regularization terms and Taylor residual scan.
    Regcheck(Common),
    /// Rollout term catalog, divergence scan and value-function expansion.
    Divergence(Common),
    /// Train the toy world model.
    Train(Common),
    /// Robustness suite for a trained model.
    Evaluate(Common),
    /// Open-loop rollouts of a trained model.
    Rollout(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, c): (fn(&Invocation) -> Result<Vec<PathBuf>, CliError>, Common) = match cli.command {
        Command::Simulate(c) => (commands::simulate, c),
        Command::Sensitivity(c) => (commands::sensitivity, c),
        Command::Regcheck(c) => (commands::regcheck, c),
        Command::Divergence(c) => (commands::divergence, c),
        Command::Train(c) => (commands::train_cmd, c),
        Command::Evaluate(c) => (commands::evaluate, c),
        Command::Rollout(c) => (commands::rollout, c),
    };
    let inv = Invocation { config: c.config, seed: c.seed, out: c.out };
    match run(&inv) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: invalid config: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
