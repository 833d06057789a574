//! `flowcast`: simulate, train, forecast and evaluate from one configuration file.

mod commands;
mod config;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Baseline;

/// Failure classified by exit code: 2 for invalid input, 1 for runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(flowcast::Error),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(flowcast::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<flowcast::Error> for CliError {
    fn from(e: flowcast::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowcast", version, about = "Latent flow forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; falls back to $FLOWCAST_CONFIG, then the built-in desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set solver.seed=9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory and write a dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reduced-order model on the training split.
    TrainRom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent processor on ROM-encoded training snapshots.
    TrainProcessor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rom: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast `--horizon` snapshots after the lookback window.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rom: PathBuf,
        #[arg(long)]
        proc: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        context_pairs: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Index of the first forecast snapshot; defaults to the train/test split index.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a forecast against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast scenario B with a processor trained on scenario A, without retraining.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proc: PathBuf,
        #[arg(long)]
        rom_a: PathBuf,
        #[arg(long)]
        rom_b: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        context_pairs: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Generate { common, out } => commands::generate(&common, out, &args),
        Command::TrainRom { common, data, out } => commands::train_rom(&common, data, out, &args),
        Command::TrainProcessor { common, data, rom, out } => {
            commands::train_processor(&common, data, rom, out, &args)
        }
        Command::Predict {
            common,
            rom,
            proc,
            data,
            horizon,
            context_pairs,
            stride,
            start,
            out,
        } => commands::predict(
            &common,
            commands::ForecastArgs {
                rom,
                proc,
                data,
                horizon,
                context_pairs,
                stride,
                start,
            },
            out,
            &args,
        ),
        Command::Evaluate {
            common,
            pred,
            truth,
            baseline,
            plots,
            out,
        } => commands::evaluate(&common, &pred, &truth, baseline, plots, out, &args),
        Command::Transfer {
            common,
            proc,
            rom_a,
            rom_b,
            data_b,
            horizon,
            context_pairs,
            stride,
            start,
            out,
        } => commands::transfer(
            &common,
            &rom_a,
            commands::ForecastArgs {
                rom: rom_b,
                proc,
                data: data_b,
                horizon,
                context_pairs,
                stride,
                start,
            },
            out,
            &args,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
