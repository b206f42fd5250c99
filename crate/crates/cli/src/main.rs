//! `uqkit` command-line tool: generate data, train, predict and plot.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use uqkit::ModeSpec;

#[derive(Debug, Parser)]
#[command(name = "uqkit", version, about = "Regression with predictive uncertainty (SVGP and MDN)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a target-only dataset from a mixture of normal modes.
    Generate(GenerateArgs),
    /// Train a model on a CSV and save it as a model file.
    Train(TrainArgs),
    /// Predict with uncertainty for every row of a CSV.
    Predict(PredictArgs),
    /// Plot predictive distributions for selected rows as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of rows.
    #[arg(long)]
    pub n: usize,
    /// Mixture component as MEAN,STD,WEIGHT; repeat for more modes.
    #[arg(long = "mode", required = true, allow_hyphen_values = true, value_parser = parse_mode)]
    pub modes: Vec<ModeSpec>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Name of the target column.
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Svgp,
    Mdn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Target column; every other column except --weights is a feature.
    #[arg(long)]
    pub target: String,
    /// Column holding nonnegative sample weights.
    #[arg(long)]
    pub weights: Option<String>,
    /// [svgp] Inducing points (default: min(100, training rows)).
    #[arg(long)]
    pub num_inducing_points: Option<usize>,
    /// [mdn] Hidden units (default 10).
    #[arg(long = "dense1-units")]
    pub dense1_units: Option<usize>,
    /// [mdn] Mixture components (default 3).
    #[arg(long)]
    pub n_gaussians: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub num_epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threads used to assemble batches; results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub num_workers: usize,
    /// Z-score features with statistics from the training split.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    MaxWeightMean,
    MaxWeightSample,
    AverageSample,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target column to skip, and to score predictions against.
    #[arg(long)]
    pub target: Option<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [mdn] How a point prediction is taken from the mixture.
    #[arg(long, value_enum, default_value = "max-weight-mean")]
    pub strategy: Strategy,
    /// [mdn] Draws for the average-sample strategy.
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Actual-value column (default: the target the model was trained on).
    #[arg(long)]
    pub target: Option<String>,
    /// Zero-based row numbers, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub ncols: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Draws per density estimate.
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    /// [mdn] Strategy for the predicted marker.
    #[arg(long, value_enum, default_value = "max-weight-mean")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_mode(s: &str) -> Result<ModeSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [mean, std, weight] = parts[..] else {
        return Err(format!("expected MEAN,STD,WEIGHT, got {s:?}"));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|_| format!("{v:?} is not a number"));
    Ok(ModeSpec { mean: num(mean)?, std: num(std)?, weight: num(weight)? })
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(uqkit::Error),
}

impl From<uqkit::Error> for CliError {
    fn from(e: uqkit::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Plot(_) => "plot",
    };
    let result = match cli.command {
        Command::Generate(args) => commands::generate(&args),
        Command::Train(args) => commands::train(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Plot(args) => commands::plot(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd.find_subcommand_mut(name).map(|c| c.render_usage().to_string()).unwrap_or_default();
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try 'uqkit {name} --help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
