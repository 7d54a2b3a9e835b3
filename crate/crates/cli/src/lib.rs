// SPDX-License-Identifier: Apache-2.0

//! The `avis` command-line tool.
//!
//! [`run`] parses an argument vector, dispatches to a subcommand and returns
//! the process exit status: 0 on success, 1 on usage or validation failure,
//! 2 on internal error. Results go to `out`, diagnostics to `err`.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{load_config, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: a malformed document, an invariant violation or an
    /// infeasible request.
    #[error("{0}")]
    Validation(String),
    /// Anything else: failed writes, divergence.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<manifest::ManifestError> for CliError {
    fn from(e: manifest::ManifestError) -> Self {
        match e {
            manifest::ManifestError::Unreadable { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<avis_core::Error> for CliError {
    fn from(e: avis_core::Error) -> Self {
        match e {
            avis_core::Error::Io(_) | avis_core::Error::Diverged { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "avis", version, about = "Instance-aware audio-visual segmentation toolkit")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Soas,
    Avsc,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Optimal assignment of ground-truth segments to predictions.
    Match {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segmentation loss terms under the optimal matching.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving per-prediction mask gradients (SASL) and class
        /// logit gradients (JSON).
        #[arg(long)]
        grad_dir: Option<PathBuf>,
    },
    /// Localization map and final mask from predictions and audio.
    Infer {
        #[arg(long)]
        pred: PathBuf,
        /// JSON array of embedding values.
        #[arg(long)]
        audio: PathBuf,
        /// Checkpoint whose audio head is used.
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Score predicted masks against ground truth paired by file stem.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = avis_core::metrics::DEFAULT_BETA2)]
        beta2: f64,
        /// Binarization thresholds for soft (SASL) predictions.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        /// Machine-readable report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic samples to a directory.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both stages and evaluate on the held-out split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-test-sample prediction manifests for `infer`.
        #[arg(long)]
        export_predictions: bool,
    },
    /// Train ablation variants and compare them.
    Ablate {
        /// Defaults to the multi-source config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Study::All)]
        study: Study,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match commands::dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
