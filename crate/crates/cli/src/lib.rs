//! Command-line front end: train / eval / bench / selftest over the core
//! library, driven by a layered TOML + env + flag configuration.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod lock;
pub mod selftest;

/// Failures split by exit code: bad configuration (2) versus a run that
/// started and then failed (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(
    name = "hgconv",
    about = "Byte-sequence classifier built on holographic global convolutions",
    version
)]
pub struct Cli {
    /// TOML config file; defaults reproduce the stock hyperparameters
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run seed (overrides config and HGCONV_TRAIN_SEED)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides config and HGCONV_OUTPUT_DIR)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Logical data-parallel workers (overrides config and HGCONV_TRAIN_WORKERS)
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Machine-readable output where the subcommand supports it
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model; writes per-epoch checkpoints and a metrics CSV
    Train,
    /// Evaluate a checkpoint and print accuracy plus the confusion matrix
    Eval {
        /// Checkpoint to load (default: <out>/final.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest to evaluate on (default: the config's data section)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Measure wall time and peak memory across sequence lengths
    Bench,
    /// Run the fast property suite and report each check
    Selftest,
}

/// Dispatches a parsed command line. Returns the error for `main` to print
/// and turn into an exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let flags = config::FlagOverrides {
        seed: cli.seed,
        out: cli.out.clone(),
        workers: cli.workers,
    };
    match cli.cmd {
        Cmd::Train => {
            let cfg = config::resolve(cli.config.as_deref(), &config::process_env(), &flags)?;
            commands::cmd_train(&cfg, cli.json).map(|_| ())
        }
        Cmd::Eval {
            checkpoint,
            manifest,
        } => {
            let cfg = config::resolve(cli.config.as_deref(), &config::process_env(), &flags)?;
            commands::cmd_eval(&cfg, checkpoint.as_deref(), manifest.as_deref(), cli.json)
                .map(|_| ())
        }
        Cmd::Bench => {
            let cfg = config::resolve(cli.config.as_deref(), &config::process_env(), &flags)?;
            commands::cmd_bench(&cfg, cli.json).map(|_| ())
        }
        Cmd::Selftest => commands::cmd_selftest(),
    }
}
