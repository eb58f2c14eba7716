//! The `birdscape` command line: ingest → synth → features → train →
//! predict → eval/sweep → report, driven by one TOML experiment file.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod report;
pub mod timeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "birdscape", version, about = "Synthetic soundscape bird-call detection pipeline")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent downloads during ingest.
    #[arg(long, global = true, default_value_t = 4)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Catalogue the labeled pool and backgrounds into manifests.
    Ingest,
    /// Embed pool snippets into backgrounds.
    Synth,
    /// Precompute log-Mel caches for the training dataset.
    Features,
    /// Train a model, or a grid of models with --grid.
    Train {
        /// `key=v1,v2,...` axes; keys: fill_density, preset.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
    },
    /// Write per-second prediction timelines for audio files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides eval.threshold for the detection flags.
        #[arg(long)]
        threshold: Option<f64>,
        /// Overrides eval.pooling (max or mean).
        #[arg(long)]
        pooling: Option<String>,
        #[arg(required = true)]
        audio: Vec<PathBuf>,
    },
    /// Score timelines against label CSVs at one threshold.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        truth: Vec<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Precision/recall/F1 over a threshold grid.
    Sweep {
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        truth: Vec<PathBuf>,
    },
    /// Static HTML heat table and combined CSV from timelines.
    Report {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(required = true)]
        timelines: Vec<PathBuf>,
    },
    /// Write a synthetic toy fixture tree and a config that uses it.
    Toy {
        /// Where to write the fixture; defaults to `<out>/toy`.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Shrink everything for smoke tests.
        #[arg(long)]
        small: bool,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context::new(&cli)?;
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Synth => commands::synth(&ctx).map(|_| ()),
        Command::Features => commands::features(&ctx),
        Command::Train { grid } if grid.is_empty() => commands::train(&ctx).map(|_| ()),
        Command::Train { grid } => commands::train_grid(&ctx, &grid).map(|_| ()),
        Command::Predict {
            checkpoint,
            threshold,
            pooling,
            audio,
        } => commands::predict(&ctx, &checkpoint, threshold, pooling.as_deref(), &audio).map(|_| ()),
        Command::Eval {
            predictions,
            truth,
            threshold,
        } => commands::eval(&ctx, &predictions, &truth, threshold).map(|_| ()),
        Command::Sweep { predictions, truth } => commands::sweep(&ctx, &predictions, &truth).map(|_| ()),
        Command::Report { threshold, timelines } => commands::report(&ctx, &timelines, threshold),
        Command::Toy { dir, small } => commands::toy(&ctx, dir, small),
    }
}
