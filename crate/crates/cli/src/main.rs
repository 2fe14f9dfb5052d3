//! `ctql`: collect transition data, learn a Q-function controller offline,
//! evaluate it in closed loop and compare against the LQR oracle.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ctql_cli::commands::{self, EvaluateArgs};
use ctql_cli::config::{parse_vector, with_seed, ConfigError, RunConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "ctql", version, about = "Off-policy continuous-time Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample transitions over the configured box and write the dataset.
    Collect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run policy or value iteration; writes the trace and the learned model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Existing dataset; collected from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate the closed loop under a learned model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Supplies `[evaluate]` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial state, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Riccati solution and held-action Q-matrix for a linear plant.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Collect { config, out, seed } => {
            let config = with_seed(RunConfig::load(&config)?, seed);
            commands::cmd_collect(&config, &config.output_dir(out.as_deref()))
        }
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => {
            let config = with_seed(RunConfig::load(&config)?, seed);
            commands::cmd_train(&config, dataset.as_deref(), &config.output_dir(out.as_deref()))
        }
        Command::Evaluate {
            model,
            config,
            x0,
            horizon,
            out,
        } => {
            let config = config.as_deref().map(RunConfig::load).transpose()?;
            let x0 = x0.as_deref().map(|s| parse_vector(s, "--x0")).transpose()?;
            let out = match (&out, &config) {
                (Some(dir), _) => dir.clone(),
                (None, Some(c)) => c.output_dir(None),
                (None, None) => model.parent().map(PathBuf::from).unwrap_or_default(),
            };
            commands::cmd_evaluate(EvaluateArgs {
                model: &model,
                config: config.as_ref(),
                x0,
                horizon,
                out: &out,
            })
        }
        Command::Oracle { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::cmd_oracle(&config, &config.output_dir(out.as_deref()))
        }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    if error.downcast_ref::<ConfigError>().is_some() {
        return EXIT_VALIDATION;
    }
    match error.chain().find_map(|e| e.downcast_ref::<ctql::Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code(&error))
        }
    }
}
