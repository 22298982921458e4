//! `neurovol` — end-to-end pipeline for predicting sex and age from
//! volumetric brain images: synthetic cohort generation, preprocessing,
//! training of three 3D architectures, prediction, statistical evaluation
//! with pairwise model comparison, subgroup breakdowns, saliency maps and
//! region-volume correlations.
//!
//! Exit codes: 0 success, 2 config, 3 I/O, 4 numeric, 5 shape, 6 contract.

mod commands;
mod config;
mod error;
mod plots;
mod runmeta;

use clap::{Parser, Subcommand, ValueEnum};
use config::LoadedConfig;
use error::{CliError, CODE_CONFIG};
use neurovol::nets::Task;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "neurovol", version, about = "3D brain-volume deep learning pipeline")]
struct Cli {
    /// Experiment config JSON (strict schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training / synthesis seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the deterministic single-threaded ordering. Execution is
    /// always deterministic in this build; the flag is accepted for
    /// interface stability.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Sex,
    Age,
    BinaryGeneric,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Sex => Task::Sex,
            TaskArg::Age => Task::Age,
            TaskArg::BinaryGeneric => Task::BinaryGeneric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with manifest and region table.
    Synth,
    /// Apply z-normalization and center cropping to a manifest's volumes.
    Preprocess,
    /// Train the configured model with early stopping.
    Train {
        /// Continue from the existing checkpoint, keeping epoch numbering.
        #[arg(long)]
        resume: bool,
    },
    /// Run a checkpoint over a manifest and write a prediction CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV path (default: <output_dir>/predictions.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics with confidence intervals; with several prediction files,
    /// pairwise model comparison with significance markers.
    Evaluate {
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Stratified metrics: age bins for sex classification, sex groups
        /// for age prediction.
        #[arg(long)]
        subgroups: bool,
        /// Fit and apply the linear age-bias correction.
        #[arg(long)]
        bias_correct: bool,
        /// Validation-set predictions to fit the bias model on, one per
        /// --predictions file.
        #[arg(long = "fit-predictions")]
        fit_predictions: Vec<PathBuf>,
        /// Fit the bias model on the evaluated predictions themselves
        /// (diagnostic mode).
        #[arg(long)]
        fit_in_sample: bool,
        /// Also emit ROC / scatter SVG plots.
        #[arg(long)]
        svg: bool,
    },
    /// Saliency maps: per-subject input×gradient, top-k averaged,
    /// thresholded, exported as NIfTI plus a slice mosaic.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// How many most-confident subjects to average (default from config).
        #[arg(long)]
        k: Option<usize>,
        /// Overlay threshold in [0, 1] (default from config).
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Correlate regional volumes with predictions and labels.
    Correlate {
        /// Region mapping CSV: idp_id,region_name,lobe.
        #[arg(long)]
        regions: PathBuf,
        /// Per-subject region volumes CSV: subject_id,idp_id,volume.
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Output CSV (default: correlations.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require_config(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::new(CODE_CONFIG, "this command needs --config <file>"))?;
    LoadedConfig::load(path)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let out_dir = cli.output_dir.as_deref();
    match &cli.command {
        Command::Synth => commands::cmd_synth(&require_config(cli)?, out_dir, cli.seed),
        Command::Preprocess => commands::cmd_preprocess(&require_config(cli)?, out_dir),
        Command::Train { resume } => commands::cmd_train(&require_config(cli)?, out_dir, cli.seed, *resume),
        Command::Predict { checkpoint, manifest, out } => {
            commands::cmd_predict(&require_config(cli)?, checkpoint, manifest, out.as_deref(), out_dir)
        }
        Command::Evaluate { predictions, task, subgroups, bias_correct, fit_predictions, fit_in_sample, svg } => {
            let loaded = match &cli.config {
                Some(path) => Some(LoadedConfig::load(path)?),
                None => None,
            };
            let args = commands::EvaluateArgs {
                predictions: predictions.clone(),
                task: (*task).into(),
                subgroups: *subgroups,
                bias_correct: *bias_correct,
                fit_predictions: fit_predictions.clone(),
                fit_in_sample: *fit_in_sample,
                svg: *svg,
            };
            commands::cmd_evaluate(loaded.as_ref(), &args, out_dir)
        }
        Command::Explain { checkpoint, manifest, k, threshold } => {
            commands::cmd_explain(&require_config(cli)?, checkpoint, manifest, *k, *threshold, out_dir)
        }
        Command::Correlate { regions, volumes, predictions, task, out } => {
            commands::cmd_correlate(regions, volumes, predictions, (*task).into(), out.as_deref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
