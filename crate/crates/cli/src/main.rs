//! Command-line front end: train, evaluate, export plot data, dump frames.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rqdia_core::harness::metrics::fmt_float;
use rqdia_core::harness::{
    dump_frames, evaluate, export_plot_data, run_training, HarnessError, RunConfig,
};

#[derive(Parser)]
#[command(name = "rqdia", about = "Pixel RL with Q-value distribution equalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training session from a config file.
    Train {
        /// Path to the sectioned key-value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics and checkpoints.
        #[arg(long, default_value = "runs/out")]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with greedy policies.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Aggregate eval curves from several metrics.csv files.
    ExportPlots {
        /// Input metrics.csv paths (one per seed).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write environment frames as PGM files for inspection.
    DumpFrames {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: u64,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<rqdia_core::harness::ConfigError>()
                .is_some()
                || matches!(
                    err.downcast_ref::<HarnessError>(),
                    Some(HarnessError::Config(_))
                );
            if config_error {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let mut config = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                config.run.seed = seed;
            }
            let summary = run_training(&config, &out, resume.as_deref())?;
            println!(
                "done: {} env steps, {} updates, {} episodes{}",
                summary.env_steps,
                summary.updates,
                summary.episodes,
                match summary.final_eval {
                    Some(v) => format!(", final eval mean return {}", fmt_float(v)),
                    None => String::new(),
                }
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
        } => {
            let (mean, returns) = evaluate(&checkpoint, episodes)?;
            for (i, r) in returns.iter().enumerate() {
                println!("episode {i}: {}", fmt_float(*r));
            }
            println!("mean: {}", fmt_float(mean));
            Ok(())
        }
        Command::ExportPlots { inputs, out } => {
            let refs: Vec<&std::path::Path> = inputs.iter().map(|p| p.as_path()).collect();
            export_plot_data(&refs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::DumpFrames { config, steps, out } => {
            let config = RunConfig::from_file(&config)?;
            let n = dump_frames(&config, steps, &out)?;
            println!("wrote {n} frames to {}", out.display());
            Ok(())
        }
    }
}
