//! Command-line entry point for the navigation pipeline: data generation,
//! pre-training, fine-tuning, evaluation, standalone metric computation and
//! ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or checkpoint
//! error, 4 numeric failure, 1 anything else. Progress goes to stderr;
//! machine-readable output goes to files (or stdout for `metrics`).

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lovis", about = "Vision-and-language navigation at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world with train/val_seen/val_unseen splits.
    GenData {
        /// Number of training houses (30% more are held out as unseen).
        #[arg(long, default_value_t = 10)]
        houses: usize,
        /// Training episodes per house.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// r2r (single shortest-path goals) or r4r (joined trajectories).
        #[arg(long, default_value = "r2r")]
        style: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on masked-language, alignment, vision and orientation tasks.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured number of pre-training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune with mixed imitation and policy-gradient learning.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; omit to start from random initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for history.csv and best.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// train, val_seen or val_unseen.
        #[arg(long)]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional directory for metrics.csv and trajectories.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted trajectories against references.
    Metrics {
        /// JSON-lines predictions ({house_id, path}).
        #[arg(long)]
        pred: PathBuf,
        /// JSON-lines references; dataset split files work as-is.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Dataset directory holding houses.json.
        #[arg(long)]
        houses: PathBuf,
        /// r2r reports NE/SR/SPL; r4r adds CLS/nDTW/sDTW.
        #[arg(long, default_value = "r2r")]
        style: String,
        /// CSV output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one ablation axis end to end (pretrain, fine-tune, evaluate).
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// "modules" (h, h+o, h+v, h+o+v) or "tasks" (mlm through mlm+ssap+vm+om).
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> lovis_core::error::Result<()> {
    match cli.command {
        Command::GenData {
            houses,
            episodes,
            seed,
            style,
            out,
        } => commands::gen_data(houses, episodes, seed, &style, &out),
        Command::Pretrain {
            data,
            config,
            steps,
            out,
        } => commands::pretrain(&data, config.as_deref(), steps, &out),
        Command::Finetune {
            data,
            ckpt,
            config,
            out,
        } => commands::finetune(&data, ckpt.as_deref(), config.as_deref(), &out),
        Command::Eval {
            data,
            ckpt,
            split,
            config,
            out,
        } => commands::eval(&data, &ckpt, &split, config.as_deref(), out.as_deref()),
        Command::Metrics {
            pred,
            reference,
            houses,
            style,
            out,
        } => commands::metrics(&pred, &reference, &houses, &style, out.as_deref()),
        Command::Ablate {
            data,
            config,
            axis,
            out,
        } => commands::ablate(&data, config.as_deref(), &axis, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
