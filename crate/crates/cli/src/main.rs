//! Pipeline driver for hand-primed object localization experiments:
//! dataset generation, two-stage training, evaluation, prediction dumps,
//! and the full multi-variant comparison table.

mod commands;
mod compare;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use handprime::{Error, Result};

#[derive(Parser)]
#[command(
    name = "handprime",
    version,
    about = "Hand-primed object-of-interest localization on synthetic scenes"
)]
struct Cli {
    /// Run-config JSON file; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for this command's artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    /// Parallel training jobs in `compare`; every job is internally
    /// single-threaded, so results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset with train/val/test splits.
    Generate,
    /// Train the hand network or a localization variant on a dataset.
    Train {
        /// Dataset directory (from `generate`).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Variant to train; overrides the config's model section.
        #[arg(long)]
        variant: Option<String>,
        /// Trained hand checkpoint, required by hand-dependent variants.
        #[arg(long, value_name = "DIR")]
        hand_checkpoint: Option<PathBuf>,
        /// Hyperparameter preset: desk, paper-hand, or paper-loc.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a checkpoint on one split and write report.json.
    Eval {
        /// Checkpoint directory (from `train`).
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Task to score: hand or localization; defaults to the natural
        /// task of the checkpoint's variant.
        #[arg(long)]
        task: Option<String>,
        /// Also write one prediction overlay PPM per image.
        #[arg(long)]
        overlays: bool,
    },
    /// Write per-image predicted masks and confidences for one split.
    Predict {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        task: Option<String>,
    },
    /// Run the whole experiment: dataset, hand net, every localization
    /// variant over several seeds, and a median comparison table.
    Compare {
        /// Number of seeds per variant (seed, seed+1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Skip training and feed ground-truth probability maps through
        /// the metric pipeline; every row must come out 1.0.
        #[arg(long)]
        oracle: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::config("this command needs --out <dir>"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Generate => {
            let out = require_out(&cli)?;
            commands::generate(cfg, &out, cli.force)
        }
        Cmd::Train {
            data,
            variant,
            hand_checkpoint,
            preset,
        } => {
            let out = require_out(&cli)?;
            commands::train(
                cfg,
                data,
                variant.as_deref(),
                hand_checkpoint.as_deref(),
                preset.as_deref(),
                &out,
                cli.force,
            )
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            task,
            overlays,
        } => {
            let out = require_out(&cli)?;
            commands::eval(
                cfg,
                checkpoint,
                data,
                split,
                task.as_deref(),
                *overlays,
                &out,
                cli.force,
            )
        }
        Cmd::Predict {
            checkpoint,
            data,
            split,
            task,
        } => {
            let out = require_out(&cli)?;
            commands::predict(
                cfg,
                checkpoint,
                data,
                split,
                task.as_deref(),
                &out,
                cli.force,
            )
        }
        Cmd::Compare { seeds, oracle } => {
            let out = require_out(&cli)?;
            compare::run(cfg, &out, *seeds, cli.jobs, *oracle, cli.force)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
