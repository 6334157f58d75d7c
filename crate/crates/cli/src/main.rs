//! `seqrec`: prepare splits, train presets, evaluate and compare runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 ingestion, 3 split,
//! 4 configuration, 5 non-finite loss, 6 split mismatch.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqrec_core::Error;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Transformer sequential recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name or result-table label; overrides the config's preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root holding prepared splits and run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Evaluation cutoff; replaces `eval.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter and split the dataset.
    Prepare(Common),
    /// Train one configuration and evaluate it on the test split.
    Train(Common),
    /// Evaluate trained runs on a shared split and compare them.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directories to evaluate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Train every combination of the config's `[grid]` axes.
    Grid(Common),
    /// Summarize completed runs under `--out`, sorted by NDCG.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Write a synthetic first-order Markov interaction log as CSV.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Failures with their documented exit codes.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    SplitMismatch(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Ingest { .. } | Error::IngestFile(_)) => 2,
            CliError::Core(Error::Split(_) | Error::EmptyAfterFilter) => 3,
            CliError::Core(Error::Config(_)) => 4,
            CliError::Core(Error::NonFiniteLoss { .. }) => 5,
            CliError::SplitMismatch(_) => 6,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::SplitMismatch(m) => write!(f, "split mismatch: {m}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(c) => commands::prepare(&c),
        Command::Train(c) => commands::train(&c),
        Command::Evaluate { common, runs } => commands::evaluate(&common, &runs),
        Command::Grid(c) => commands::grid(&c),
        Command::Report { out } => commands::report(&out),
        Command::Synth {
            output,
            users,
            items,
            seed,
        } => commands::synth(&output, users, items, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
