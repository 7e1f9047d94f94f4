use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cascade_rpn::harness::{cmd_ablate, cmd_gen, cmd_report, cmd_run, render_text, with_threads, Overrides};
use cascade_rpn::postprocess::NmsPreset;
use clap::{Args, Parser, Subcommand};
use log::info;

/// Cascaded region proposal experiments on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "crpn", version)]
struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the NMS preset: imagenet (0.4), voc (0.45), coco (0.45), classic (0.3).
    #[arg(long)]
    preset: Option<NmsPreset>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            preset: self.preset,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one config and write a run record.
    Run {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every cell of a grid config into a directory.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine run records into one table.
    Report {
        /// Run record files.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Also write the exact CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, out } => {
            let d = cmd_gen(&common.config, &out, &common.overrides())?;
            println!("{} scenes, {} objects -> {}", d.scenes.len(), d.num_objects(), out.display());
        }
        Command::Run { common, dataset, out } => {
            let rec = cmd_run(&common.config, dataset.as_deref(), &out, &common.overrides())?;
            print!("{}", render_text(std::slice::from_ref(&rec)));
        }
        Command::Ablate { common, dataset, out } => {
            let recs = cmd_ablate(&common.config, dataset.as_deref(), &out, &common.overrides())?;
            info!("{} cells written to {}", recs.len(), out.display());
            print!("{}", render_text(&recs));
        }
        Command::Report { records, out } => {
            print!("{}", cmd_report(&records, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = with_threads(threads, || execute(cli.command))
        .context("cannot start worker pool")
        .and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crpn: {e:#}");
            ExitCode::FAILURE
        }
    }
}
