use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fmfilter::commands::{self, EvalArgs, Experiment, GenDataArgs, TrainArgs};
use fmfilter::trainer::Stage;

#[derive(Parser)]
#[command(name = "fmfilter", version, about = "Temporal feature filter: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic train and test sequences.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image size as HxW.
        #[arg(long, default_value = "32x32")]
        size: String,
        #[arg(long, default_value_t = 7)]
        length: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        /// Keep the camera still, so every frame shows the same view.
        #[arg(long = "static")]
        still: bool,
    },
    /// Apply noise, clutter and lighting perturbations.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output dataset directory; may equal the input.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training configuration as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Network configuration as JSON, for a fresh start.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Run an evaluation experiment.
    Eval {
        #[arg(long, value_parser = parse_experiment)]
        experiment: Experiment,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Unfiltered baseline checkpoint, for `compare`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Warp one frame into the next with ground-truth depth and motion.
    WarpDemo {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Also emit gate and depth images from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    Experiment::parse(s).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, train, test, seed, size, length, classes, still } => {
            let (height, width) = commands::parse_size(&size)?;
            commands::gen_data(&GenDataArgs { out, train, test, seed, height, width, length, classes, still })?;
        }
        Command::Perturb { input, out, seed } => {
            let n = commands::perturb(&input, &out, seed).with_context(|| format!("perturbing {}", input.display()))?;
            eprintln!("perturbed {n} sequences");
        }
        Command::Train { stage, data, out, config, init, net } => {
            let args = TrainArgs { stage, data, out, config, init, net };
            commands::train(&args, |m| {
                eprintln!("{} epoch {}: objective {:.5}", m.stage, m.epoch, m.objective);
            })?;
        }
        Command::Eval { experiment, data, ckpt, baseline, out, seed } => {
            let report = commands::eval(&EvalArgs { experiment, data, ckpt, baseline, out, seed })?;
            print!("{}", report.to_text());
        }
        Command::WarpDemo { seq, out, frame, ckpt } => {
            commands::warp_demo(&seq, &out, frame, ckpt.as_deref())?;
        }
    }
    Ok(())
}
