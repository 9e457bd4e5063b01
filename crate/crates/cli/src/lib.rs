//! The `air` command line: analysis, adaptation runs, evaluation and reports.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use air_core::AirError;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::dispatch;
pub use config::{parse_config, parse_override, ResolvedConfig};

/// Directory searched for `<dataset>.bin` embedding caches.
pub const CACHE_ENV: &str = "AIR_CACHE_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{0}")]
    Config(AirError),
    #[error("{0}")]
    Runtime(AirError),
}

impl CliError {
    pub(crate) fn from_validation(e: AirError) -> Self {
        Self::Config(e)
    }

    /// 1 for usage and validation errors, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Runtime(_) => 2,
            _ => 1,
        }
    }
}

impl From<AirError> for CliError {
    fn from(e: AirError) -> Self {
        match e {
            AirError::Config { .. } => Self::Config(e),
            other => Self::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "air",
    version,
    about = "Zero-shot generator adaptation with iterative anchor refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set t_int=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder backend.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Misalignment versus concept distance over sampled concept pairs.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// `synthetic`, or the name of a cache `<name>.bin` under AIR_CACHE_DIR.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
        #[arg(long, default_value = air_core::analysis::DEFAULT_TEMPLATE)]
        template: String,
    },
    /// Run one adaptation in the toy world.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Directional loss only, no anchors.
        #[arg(long)]
        baseline: bool,
    },
    /// Metric suite over a finished run directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Clusters for intra-cluster diversity.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Misalignment of one image offset against several prompt templates.
    PromptStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long = "template")]
        templates: Vec<String>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Concept-shift curve and misalignment alleviation for a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
/// Messages go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
