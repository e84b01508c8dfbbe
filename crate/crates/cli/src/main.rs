//! `cvae`: mask generation, training, imputation, evaluation and
//! information curves for tabular data with missing values.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cvae", version, about = "VAEs for tabular data with missing values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a 0/1 observation mask for a data file.
    Genmask(GenmaskArgs),
    /// Split a data file (and its mask) into train and test files.
    Split(SplitArgs),
    /// Train a model from a TOML or JSON run configuration.
    Train(TrainArgs),
    /// Fill the hidden cells of a data file.
    Impute(ImputeArgs),
    /// Score a trained model on held-out cells.
    Eval(EvalArgs),
    /// Greedy feature acquisition and its information curve.
    Ic(IcArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mechanism {
    Mcar,
    SelfCensor,
}

#[derive(Args)]
pub struct DataArgs {
    /// Data CSV (empty cells are missing).
    #[arg(long)]
    pub data: PathBuf,
    /// The data file has no header row.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Args)]
pub struct GenmaskArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub mechanism: Mechanism,
    /// Fraction of cells hidden (mcar only).
    #[arg(long)]
    pub rate: Option<f64>,
    /// Defaults to CVAE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Defaults to CVAE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (`.json` is read as JSON, anything else as TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data` in the configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `mask` in the configuration.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Overrides `out_dir` in the configuration.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock seconds in the training log.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args)]
pub struct ModelArgs {
    /// Checkpoint written by `cvae train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Observation mask (1 = observed); defaults to the data's own cells.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Posterior samples per row.
    #[arg(long, default_value_t = cvae::evalkit::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Defaults to CVAE_SEED, then the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads over rows.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write values in the model's [0, 1] units instead of raw units.
    #[arg(long)]
    pub scaled: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Ground truth for the hidden cells (needed by rmse and nll).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Comma-separated subset of rmse, nll, elbo.
    #[arg(long, default_value = "rmse,nll,elbo", value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Dataset label in the record; defaults to the data file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Nominal missing rate in the record; defaults to the realized one.
    #[arg(long)]
    pub missing_rate: Option<f64>,
    /// Report rmse and nll in raw units.
    #[arg(long)]
    pub unscaled: bool,
    /// Results CSV to create or append to.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct IcArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target column, by name or index.
    #[arg(long)]
    pub target_col: String,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Outer predictive samples per reward.
    #[arg(long, default_value_t = 10)]
    pub outer: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw the curve (and any overlays) as SVG.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Further IC CSVs drawn on the same plot.
    #[arg(long)]
    pub overlay: Vec<PathBuf>,
    /// Legend label; defaults to the model kind.
    #[arg(long)]
    pub label: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Genmask(a) => commands::genmask(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ic(a) => commands::ic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
