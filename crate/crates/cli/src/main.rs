use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fednorm_cli::{cmd_check_props, cmd_partition, cmd_run, cmd_toy_shift, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fednorm", version, about = "Federated averaging with pluggable normalization layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training from a config file
    Run { config: PathBuf },
    /// Two-device constant-shift experiment
    ToyShift { config: PathBuf },
    /// Randomized checks of the normalization identities
    CheckProps {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Write the non-IID partition manifest
    Partition { config: PathBuf },
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run { config } => {
            let out = cmd_run(&ExperimentConfig::from_file(config)?)?;
            println!("wrote {}", out.display());
        }
        Command::ToyShift { config } => {
            let out = cmd_toy_shift(&ExperimentConfig::from_file(config)?)?;
            println!("wrote {}", out.display());
        }
        Command::CheckProps { seed, trials } => return cmd_check_props(seed, trials),
        Command::Partition { config } => {
            let path = cmd_partition(&ExperimentConfig::from_file(config)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: property violations");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
