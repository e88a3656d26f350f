//! `physdiff` command-line entry point.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(name = "physdiff", version, about = "Latent diffusion forecaster for tropical-cyclone track and intensity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (TOML with [data], [synth], [model], [diffusion], [train], [eval] sections)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root random seed (unitless u64); also used as the training shuffle/noise seed
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset directory or best-track CSV (synthetic data from [synth] when omitted)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Model variant
    #[arg(long, value_name = "VARIANT", value_parser = ["none", "no-piga", "no-future", "no-both"])]
    pub ablate: Option<String>,
    /// Ensemble members per forecast window (count)
    #[arg(long, value_name = "N")]
    pub members: Option<usize>,
    /// Forecast horizon N in 6-hour steps
    #[arg(long, value_name = "N")]
    pub leads: Option<usize>,
    /// Override any config field, e.g. `--set train.lr=0.001` (repeatable; value is a TOML literal)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic best-track dataset with environment fields
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of tracks (count; overrides synth.n_tracks)
        #[arg(long, value_name = "N")]
        tracks: Option<usize>,
    },
    /// Train a model; writes run/<timestamp>/{config,checkpoints,metrics,forecasts}
    Train {
        #[command(flatten)]
        common: Common,
        /// Epochs (count; overrides train.epochs)
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps (count; overrides train.max_steps)
        #[arg(long, value_name = "N")]
        max_steps: Option<usize>,
    },
    /// Sample forecasts for the test split
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Also write every ensemble member (one CSV row per member and lead)
        #[arg(long)]
        write_members: bool,
    },
    /// Score forecasts (sampled from a checkpoint, or read from CSV) against the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Forecast CSV to score instead of sampling from a checkpoint
        #[arg(long, value_name = "PATH", conflicts_with_all = ["checkpoint", "run"])]
        forecasts: Option<PathBuf>,
        /// Tag for the metrics table when scoring a forecast CSV
        #[arg(long, value_name = "TAG")]
        tag: Option<String>,
        /// Write per-sample errors as CSV too
        #[arg(long)]
        per_sample: bool,
    },
    /// Train and evaluate every variant of the PIGA x future-field grid
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the full model's loss gradient
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Randomly sampled parameter scalars to check (count)
        #[arg(long, value_name = "N", default_value_t = 200)]
        samples: usize,
        /// Windows in the checked batch (count)
        #[arg(long, value_name = "N", default_value_t = 4)]
        batch: usize,
        /// Maximum tolerated relative error (dimensionless)
        #[arg(long, value_name = "REL", default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export horizon-averaged post-gate PIGA stream features per test window
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Diffusion step t at which features are taken (1 = least noise)
        #[arg(long, value_name = "STEP", default_value_t = 1)]
        step: usize,
    },
}

/// Where a trained model comes from.
#[derive(Args, Debug, Clone, Default)]
pub struct Source {
    /// Checkpoint file (.pdck)
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Run directory written by `train` (uses its config and best checkpoint)
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::SynthData { common, tracks } => commands::synth_data(&common, tracks),
        Command::Train { common, epochs, max_steps } => commands::train(&common, epochs, max_steps),
        Command::Forecast { common, source, write_members } => commands::forecast(&common, &source, write_members),
        Command::Evaluate { common, source, forecasts, tag, per_sample } => {
            commands::evaluate(&common, &source, forecasts.as_deref(), tag.as_deref(), per_sample)
        }
        Command::Ablate { common } => commands::ablate(&common),
        Command::GradCheck { common, samples, batch, tol } => commands::grad_check(&common, samples, batch, tol),
        Command::ExportFeatures { common, source, step } => commands::export_features(&common, &source, step),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return CliError::usage(first).report();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
