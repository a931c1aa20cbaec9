use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "glimpsekit", version, about = "Recurrent visual attention with affine glimpses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// run configuration (flat `key = value` TOML)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// overrides the configured seed
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render train/test datasets from procedural glyphs or IDX digit files in --data
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, appending to <out>/metrics.txt and checkpointing every epoch
    Train {
        #[command(flatten)]
        common: Common,
        /// continue from a checkpoint
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// fit the first N training samples as one batch
        #[arg(long, value_name = "N")]
        overfit: Option<usize>,
        /// train the two-layer convolutional reference instead
        #[arg(long)]
        baseline: bool,
    },
    /// Score a checkpoint on the test split
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        /// average per-object distributions with a second model
        #[arg(long, value_name = "CKPT2")]
        ensemble: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the unrolled model
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// number of consecutive seeds to check
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// corrupt the sampler backward pass
        #[arg(long, hide = true)]
        flip_sampler_sign: bool,
    },
    /// Draw the glimpse windows of each step over test canvases
    Visualize {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// overlay the target window of each object
        #[arg(long)]
        gt: bool,
    },
    /// Learnable scalar count per sub-network
    Params {
        #[command(flatten)]
        common: Common,
    },
}
