mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hssl::dataset::Split;
use hssl::eval::ProbeLevel;

/// Hierarchical self-supervised pre-training and segmentation fine-tuning.
#[derive(Debug, Parser)]
#[command(name = "hssl", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; profile defaults fill anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reproducible scheduling (on by default in every profile).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Threads for augmentation and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

/// Per-term switches of the pre-training objective.
#[derive(Debug, Clone, Copy, Default, Args)]
pub struct LossFlags {
    #[arg(long)]
    pub no_img: bool,
    #[arg(long)]
    pub no_task: bool,
    #[arg(long)]
    pub no_group: bool,
    #[arg(long)]
    pub no_rec: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-domain corpus.
    Synth {
        /// Output directory (defaults to `data.root`).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        images_per_task: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Self-supervised pre-training on every task's training images.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        loss: LossFlags,
    },
    /// Fine-tune for segmentation of one task.
    Finetune {
        #[arg(long)]
        task: Option<u32>,
        /// Fraction of the task's training images whose masks are used.
        #[arg(long)]
        ratio: Option<f64>,
        /// Pre-trained checkpoint to start from.
        #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
        from: Option<PathBuf>,
        /// Start from random weights.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dice of a fine-tuned checkpoint on one split.
    Eval {
        /// Defaults to `<out-dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<u32>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Linear probe of frozen features at task or group level.
    Probe {
        /// Omit to probe a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        level: Option<ProbeLevel>,
    },
    /// Write the fused feature vector of every image as CSV.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out-dir>/features.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of the pre-training gradients.
    Gradcheck {
        #[arg(long)]
        probes: Option<usize>,
        #[command(flatten)]
        loss: LossFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    hssl::runtime::retain_heap_memory();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
