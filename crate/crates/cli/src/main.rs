//! `hynt`: generate data, train, evaluate, query and inspect.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or usage error,
//! 3 invalid data, 4 numeric failure during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hynt::ErrorClass;

#[derive(Parser)]
#[command(name = "hynt", version, about = "Hyper-relational knowledge graphs with numeric literals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/valid/test fact files and its spec).
    GenData(GenDataArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Answer a query with one `?` (entity or relation) or `#?` (number) slot.
    Predict(PredictArgs),
    /// Print dataset statistics.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator spec (TOML); flags below override its values.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub discrete_relations: Option<usize>,
    /// Numeric relations, including the time relation.
    #[arg(long)]
    pub numeric_relations: Option<usize>,
    #[arg(long)]
    pub facts: Option<usize>,
    #[arg(long)]
    pub max_qualifiers: Option<usize>,
    #[arg(long)]
    pub numeric_fraction: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Train, valid and test ratios, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    /// transformer | linear
    #[arg(long)]
    pub prediction_head: Option<String>,
    /// projection | hadamard
    #[arg(long)]
    pub encoding: Option<String>,
    /// Slot families never masked in training: comma-separated R, V_N, E_qual.
    #[arg(long)]
    pub no_mask: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory (e.g. `run/best`).
    pub checkpoint: PathBuf,
    /// Run configuration naming the dataset [default: the frozen config
    /// next to the checkpoint].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// train | valid | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// tri | all (repeatable; default both)
    #[arg(long)]
    pub scope: Vec<String>,
    /// raw | filtered
    #[arg(long, default_value = "filtered")]
    pub mode: String,
    /// Directory for the report CSV files [default: the checkpoint's run directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint directory.
    pub checkpoint: PathBuf,
    /// Query in fact-file syntax, e.g. `? born_in paris` or `alice height #?`.
    pub query: String,
    /// Number of candidates listed for discrete slots.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Train file, then optional valid and test files.
    #[arg(required = true, num_args = 1..=3)]
    pub files: Vec<PathBuf>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 1,
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
