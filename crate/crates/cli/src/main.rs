//! `ssd`: synthesize data, fit PCA, train students, score, evaluate and sweep.
//!
//! Data goes to files or stdout; progress goes to stderr. Failures print one
//! line `error[<kind>]: <message>` to stderr and exit nonzero.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{ScoreMode, Suite};

#[derive(Debug)]
pub enum CliError {
    Core(ssd_core::Error),
    Config(String),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Io(..) => "io",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            // the bracketed kind already names the family
            CliError::Core(ssd_core::Error::InvalidArgument(m) | ssd_core::Error::UndefinedMetric(m)) => {
                write!(f, "{m}")
            }
            CliError::Core(ssd_core::Error::Io { path, source }) => write!(f, "{}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<ssd_core::Error> for CliError {
    fn from(e: ssd_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser)]
#[command(name = "ssd", version, about = "Semantic self-distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test datasets from the synthetic teacher.
    Synth(SynthArgs),
    /// Fit PCA on a dataset's teacher samples.
    FitPca(FitPcaArgs),
    /// Train a mixture-density student.
    Train(TrainArgs),
    /// Write per-prompt scores as NDJSON.
    Score(ScoreArgs),
    /// Run evaluation suites and write reports.
    Eval(EvalArgs),
    /// Grid over K, width, depth and PCA dimension; writes a CSV.
    Sweep(SweepArgs),
}

// Flag structs serialize only the flags actually given; see `config::resolve`.

#[derive(Args, Serialize)]
struct SynthArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Total prompts (train + test).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Prompts held out as the test split.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dh: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dz: Option<usize>,
    /// Teacher samples per prompt.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    /// Component count `K` or range `MIN-MAX`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    separation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    component_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    scale_gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    center_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label_slope: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label_midpoint: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Output directory for train.ndjson and test.ndjson.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FitPcaArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dpca: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pca: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Mixture components.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    /// Hidden layers.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    scale_floor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    val_fraction: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip: Option<f64>,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pca: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<ScoreMode>,
    /// NDJSON output file; stdout when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pca: Option<PathBuf>,
    /// Training split used to fit the correctness-probe baseline.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_dataset: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    suites: Option<Vec<Suite>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resamples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<usize>>,
    /// PCA dimensions; 0 means raw embeddings.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    dpca: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resamples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// CSV output path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => commands::synth(&config::resolve("synth", a.config.as_deref(), &a)?),
        Command::FitPca(a) => commands::fit_pca(&config::resolve("fit-pca", a.config.as_deref(), &a)?),
        Command::Train(a) => commands::train(&config::resolve("train", a.config.as_deref(), &a)?),
        Command::Score(a) => commands::score(&config::resolve("score", a.config.as_deref(), &a)?),
        Command::Eval(a) => commands::eval(&config::resolve("eval", a.config.as_deref(), &a)?),
        Command::Sweep(a) => commands::sweep(&config::resolve("sweep", a.config.as_deref(), &a)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&rendered).trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
