//! Command-line driver: one config file, one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] condense::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use condense::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(E::Config { .. } | E::ConfigMismatch { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "condense", version, about = "Compression-token pretraining and contrastive embedding training")]
pub struct Cli {
    /// Run config file (TOML).
    #[arg(short, long, global = true, default_value = "condense.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pretraining dataset.
    GenData {
        /// Dialogue format; overrides data.format.
        #[arg(long, value_parser = ["multi_turn", "single_turn", "single_turn_split", "description"])]
        format: Option<String>,
        /// Number of images; overrides data.count.
        #[arg(long)]
        count: Option<usize>,
        /// Master seed; overrides seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compression pretraining on the generated dataset.
    Pretrain {
        /// Objective; overrides pretrain.loss.
        #[arg(long, value_parser = ["ntp", "kl"])]
        loss: Option<String>,
        /// Continue from the saved pretraining checkpoint (fresh optimizer state).
        #[arg(long)]
        resume: bool,
    },
    /// Contrastive tuning with gradient caching.
    Contrast {
        /// Starting weights: a checkpoint path, or `fresh` for random init.
        #[arg(long, value_name = "CHECKPOINT|fresh")]
        init: String,
    },
    /// Held-out Precision@1 per retrieval task.
    Eval {
        /// Checkpoint to evaluate [default: the contrastive checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to these tasks (repeatable) [default: contrastive.tasks].
        #[arg(long = "task", value_enum)]
        tasks: Vec<TaskArg>,
    },
    /// Write an analysis report as CSV.
    Analyze {
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        /// Checkpoint for `sim` and `lossdist` [default: the pretraining checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and a small model.
    GradCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    T2i,
    I2t,
    I2i,
    Class,
}

impl From<TaskArg> for condense::data::Task {
    fn from(t: TaskArg) -> Self {
        use condense::data::Task;
        match t {
            TaskArg::T2i => Task::T2i,
            TaskArg::I2t => Task::I2t,
            TaskArg::I2i => Task::I2i,
            TaskArg::Class => Task::Class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    /// Pairwise similarity of compression-token states.
    Sim,
    /// Joint PCA of base, pretrained and contrastive embeddings.
    Pca,
    /// Per-token answer loss under cross-entropy and KL.
    Lossdist,
    /// Sweep over compression-token counts.
    AblateK,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
