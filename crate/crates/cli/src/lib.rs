//! Command-line harness around the `lidnet` library.
//!
//! Exit codes: 0 success, 1 internal error, 2 config error, 3 I/O error
//! (including refusing to overwrite without `--force` and a locked run
//! directory), 4 training divergence, 5 missing checkpoint, 6 missing run
//! artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lidnet::denoiser::Variant;
use lidnet::trainer::Strategy;

pub use config::{ExperimentConfig, Profile};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "lidnet", version, about = "Lesion-aware joint denoising and detection on synthetic CT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with simulated low-dose inputs.
    Simulate(SimulateArgs),
    /// Train the denoiser and detector, or the NDCT evaluation detector.
    Train(TrainArgs),
    /// Score a trained denoiser with the frozen evaluation detector.
    Eval(EvalArgs),
    /// Render tables, curves and box overlays for a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config layered over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (dataset for `simulate`, run directory otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Role {
    /// Denoiser plus co-trained detector.
    #[default]
    Lidnet,
    /// Detector trained on clean images only, used to score every model.
    EvalDetector,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; defaults to the config's `dataset.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Role::Lidnet)]
    pub role: Role,
    #[arg(long, value_parser = serde_arg::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = serde_arg::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory holding `denoiser/` (default `<run>/checkpoints/final`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation detector checkpoint (default `<run>/eval_detector`).
    #[arg(long)]
    pub eval_detector: Option<PathBuf>,
    /// Name of the model row.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Further run directories whose AP curves share the plot.
    #[arg(long)]
    pub compare: Vec<PathBuf>,
}

fn serde_arg<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Runs one parsed command; all normal output goes to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
    }
}
