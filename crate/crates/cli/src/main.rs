//! `wbc`: synthesise data, split folds, centre cells, train stages and
//! hybrids, evaluate checkpoints and inspect DCT planes.
//!
//! Every command writes into `--out` and echoes its resolved configuration
//! there as `config.toml`. Errors print a single `error[kind]: message` line
//! on stderr and exit with 2 (configuration), 3 (data) or 4 (divergence).

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wbc_core::Error;

/// Seed used when neither `--seed` nor the config file gives one.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(
    name = "wbc",
    version,
    about = "Stain-deconvolution and DCT CNN pipeline for cell images"
)]
pub struct Cli {
    /// Random seed [default: 7]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with [synth], [split], [stage], [train] sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-class dataset with a manifest
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// Subjects per class held out as test data
        #[arg(long)]
        test_subjects: Option<usize>,
    },
    /// Assign subjects to stratified folds
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Centre every cell on a blank square canvas
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Canvas side in pixels [default: the stage input size]
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a single stage (s1, s2 or s2c)
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        stage: StageArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fuse two trained components (s3 or s3c)
    TrainHybrid {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        stage: StageArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 checkpoint
        #[arg(long)]
        ckpt_a: PathBuf,
        /// Stage-2 or Stage-2C checkpoint
        #[arg(long)]
        ckpt_b: PathBuf,
    },
    /// Evaluate a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Refuse the checkpoint unless it holds this stage
        #[arg(long)]
        stage: Option<String>,
        /// test, all or fold
        #[arg(long, default_value = "test")]
        split: String,
        /// Fold assignment, for --split fold
        #[arg(long)]
        folds: Option<PathBuf>,
        /// Fold index, for --split fold
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Write OD and thresholded signed-log DCT planes of one image
    InspectDct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        energy_fraction: Option<f64>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold assignment written by `split`
    #[arg(long)]
    pub folds: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub val_fold: usize,
}

#[derive(Args, Debug, Clone)]
pub struct StageArgs {
    #[arg(long)]
    pub stage: Option<String>,
    /// relu, prelu or ptelu
    #[arg(long)]
    pub activation: Option<String>,
    /// none, full or normal_only
    #[arg(long)]
    pub augmentation: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } | Error::Numeric(_) | Error::Singular { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
