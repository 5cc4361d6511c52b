//! Experiment runner CLI.

use clap::{Parser, Subcommand};
use hidenseek::config::{parse_config, split_override, ExperimentConfig};
use hidenseek::runner;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hidenseek",
    about = "Federated sign-supermask training over frozen weights, with FedAvg and binary-supermask baselines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment (all repetitions) and write metrics CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// key=value settings applied on top of the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Initialize and server-prune only; write the pruned checkpoint and a
    /// kept-unit report.
    PruneOnly {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Emit the per-round communication-cost table without training.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load(config: &Path, overrides: &[String]) -> hidenseek::Result<ExperimentConfig> {
    let parsed: hidenseek::Result<Vec<(String, String)>> =
        overrides.iter().map(|o| split_override(o)).collect();
    parse_config(Some(config), &parsed?)
}

fn run() -> hidenseek::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let out = runner::run_experiment(&cfg)?;
            println!("wrote metrics to {}", out.display());
        }
        Command::PruneOnly { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let out = runner::run_prune_only(&cfg)?;
            println!("wrote pruned checkpoint to {}", out.display());
        }
        Command::Cost { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            runner::run_cost(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
