use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::Level;
use serde_json::json;

mod commands;
mod config;
mod logging;
mod report;

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("case ids differ between predictions and ground truth: {0}")]
    CaseMismatch(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Schema(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::CaseMismatch(_) => 4,
        }
    }
}

impl From<tumorseg::Error> for CliError {
    fn from(e: tumorseg::Error) -> Self {
        use tumorseg::Error as E;
        match e {
            E::InvalidTrainConfig(_)
            | E::InvalidSpec(_)
            | E::UnknownVariant(_)
            | E::InvalidPolicy(_)
            | E::InvalidLossConfig(_)
            | E::InvalidEnsemble(_)
            | E::InvalidMapping(_)
            | E::InvalidManifest(_)
            | E::EmptyDataset
            | E::Json(_) => CliError::Schema(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about = "Multi-modal 3D brain tumor segmentation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline config (YAML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Validate the config and print the plan without touching data.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Continue training from `<output>/train/last.ckpt`.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CaseSelection {
    /// Case ids to process; pass the flag with no ids for an empty run.
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub cases: Option<Vec<String>>,
    /// Restrict to one manifest split (train, val, test).
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model on the manifest's train split.
    Train,
    /// Predict region masks with a single checkpoint.
    Predict {
        /// Defaults to `<output>/train/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        select: CaseSelection,
    },
    /// Predict region masks with a grouped majority-vote ensemble.
    Ensemble {
        /// Membership file `{groups, threshold, ...}`; defaults to the config's `ensemble`.
        #[arg(long)]
        members: Option<PathBuf>,
        #[command(flatten)]
        select: CaseSelection,
    },
    /// Size-filter, smooth and nest raw region masks.
    Postprocess {
        /// Raw masks; defaults to `<output>/ensemble`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Case ids; defaults to every case with masks in the input directory.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        cases: Option<Vec<String>>,
    },
    /// Score masks against the manifest labels.
    Evaluate {
        /// Predicted masks; defaults to `<output>/postprocess`.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Render the aggregate table and slice overlays.
    Report {
        /// Defaults to `<output>/evaluation/aggregate.json`.
        #[arg(long)]
        aggregate: Option<PathBuf>,
        /// Masks to overlay; defaults to `<output>/postprocess`.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Write synthetic phantom cases and a manifest into `<output>`.
    Synth {
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        lesions: usize,
        /// How many of the cases go to the val split (the rest are train).
        #[arg(long, default_value_t = 0)]
        val: usize,
    },
}

fn main() -> ExitCode {
    logging::init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            logging::event(Level::Error, "failed", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            ExitCode::from(e.exit_code())
        }
    }
}
