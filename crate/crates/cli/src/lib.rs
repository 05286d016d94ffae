//! Command-line front end for the gait pipeline: corpus synthesis, signature
//! export, detector and recognizer training, embedding, and evaluation, each
//! as one subcommand writing a self-describing run directory.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod pipeline;
pub mod rundir;
pub mod settings;

#[derive(Debug, Parser)]
#[command(name = "gaitkit", version, about = "Gait detection and recognition pipeline")]
pub struct Cli {
    /// `key = value` file overriding the built-in knobs
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed for every random choice in the run
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads where a stage supports them (corpus rendering)
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic walker corpus with ground-truth manifest
    SynthGen {
        /// Corpus output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-sequence knee-slice signature images for inspection
    DhsExport {
        /// Corpus directory (holds manifest.json)
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the walking-span detector on the corpus train split
    TrainDetector {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize walking spans with a trained detector
    Detect {
        #[arg(long)]
        corpus: PathBuf,
        /// Detector checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recognizer on the corpus train split
    TrainGar {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed whole sequences with a trained recognizer
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        /// Recognizer checkpoint (full or inference-only)
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval and verification metrics for gallery/probe embedding CSVs
    Eval {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: train (or load) both models, detect, embed, evaluate
    E2e {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embed whole sequences instead of detected spans
        #[arg(long)]
        no_detector: bool,
        /// Reuse a trained detector instead of training one
        #[arg(long, value_name = "PATH")]
        detector_ckpt: Option<PathBuf>,
        /// Reuse a trained recognizer instead of training one
        #[arg(long, value_name = "PATH")]
        gar_ckpt: Option<PathBuf>,
    },
}

/// Flags shared by every subcommand.
#[derive(Debug)]
pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = Global {
        config: cli.config,
        seed: cli.seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::SynthGen { out } => commands::synth_gen(&g, &out),
        Command::DhsExport { corpus, out } => commands::dhs_export(&g, &corpus, &out),
        Command::TrainDetector { corpus, out } => commands::train_detector(&g, &corpus, &out),
        Command::Detect { corpus, ckpt, out } => commands::detect_cmd(&g, &corpus, &ckpt, &out),
        Command::TrainGar { corpus, out } => commands::train_gar_cmd(&g, &corpus, &out),
        Command::Embed { corpus, ckpt, out } => commands::embed_cmd(&g, &corpus, &ckpt, &out),
        Command::Eval { gallery, probes, out } => commands::eval_cmd(&g, &gallery, &probes, &out),
        Command::E2e {
            corpus,
            out,
            no_detector,
            detector_ckpt,
            gar_ckpt,
        } => commands::e2e(
            &g,
            commands::E2eArgs {
                corpus: &corpus,
                out: &out,
                no_detector,
                detector_ckpt: detector_ckpt.as_ref(),
                gar_ckpt: gar_ckpt.as_ref(),
            },
        ),
    }
}
