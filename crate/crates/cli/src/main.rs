//! `cov3d`: command-line frontend for the CT-scan classification pipeline.
//!
//! Exit codes are a stable contract: 0 on success, 1 on data or runtime
//! failures, 2 on usage and configuration errors.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Failure category, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exits 2.
    Usage(String),
    /// Data or runtime failure; exits 1.
    Data(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) => f.write_str(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "cov3d", version, about = "CT-scan COVID-19 classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic CT corpus with train/val manifests.
    Synth(SynthArgs),
    /// Normalize, prune, and resize manifest scans into raw caches.
    Preprocess(PreprocessArgs),
    /// Train a classifier and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint against a labeled manifest.
    Eval(EvalArgs),
    /// Classify a single scan directory.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scans in the training split.
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    /// Scans in the validation split.
    #[arg(long, default_value_t = 32)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Slices per scan.
    #[arg(long, default_value_t = 48)]
    depth: usize,
    /// Slice height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Slice width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input manifest (JSONL with id, path, label per line).
    #[arg(long)]
    manifest: PathBuf,
    /// Cache output directory.
    #[arg(long)]
    out: PathBuf,
    /// Skip the non-lung slice pruning stage.
    #[arg(long)]
    no_prune: bool,
    /// Output depth after resampling.
    #[arg(long, default_value_t = 128)]
    depth: usize,
    /// Output height after resampling.
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Output width after resampling.
    #[arg(long, default_value_t = 256)]
    width: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    val_manifest: PathBuf,
    /// Run configuration (flat JSON object).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to transfer weights from before training.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled manifest to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Scan directory (PGM slices or a raw cache).
    #[arg(long)]
    scan: PathBuf,
    /// Checkpoint to classify with.
    #[arg(long)]
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Preprocess(args) => commands::preprocess(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Predict(args) => commands::predict(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
