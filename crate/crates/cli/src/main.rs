// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver: each subcommand runs one pipeline stage inside the
//! run directory derived from the config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use circuit_cutter::harness::{load_manifests, write_report_files, BaselineKind, ExperimentConfig, Pipeline, Stage};
use circuit_cutter::Error;

#[derive(Debug, Parser)]
#[command(name = "circuit-cutter", version, about = "Learn edge ablations that remove a targeted behavior")]
struct Cli {
    /// Experiment config (JSON with `schema_version`).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: `mnist` or `toy_lm`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Root seed; overrides the config's seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base model and write its checkpoint.
    TrainBase,
    /// Compute per-node ablation values from the training set.
    Means,
    /// Learn the continuous edge mask.
    TrainMask,
    /// Threshold the learned mask into an ablated edge set.
    Round,
    /// Evaluate the hard ablation against the original model.
    Evaluate,
    /// Run a weight-editing baseline and evaluate it.
    Baseline {
        /// joint-finetune, gradient-ascent or task-arithmetic.
        kind: BaselineKind,
    },
    /// Build comparison tables and plots.
    Report {
        /// Run manifests (or run directories) to combine; defaults to the
        /// configured run.
        manifests: Vec<PathBuf>,
    },
    /// Write the computation graph as DOT, highlighting ablated edges.
    ExportDot,
    /// Run every stage in order.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let config = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => bail!(Error::Usage("pass --config <path> or --preset <name>".into())),
    };
    Ok(match cli.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { manifests } = &cli.command {
        if !manifests.is_empty() {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let runs = load_manifests(manifests)?;
            for file in write_report_files(&runs, &out)? {
                println!("{}", out.join(file).display());
            }
            return Ok(());
        }
    }
    let pipeline = Pipeline::new(load_config(&cli)?, cli.out.as_deref())?;
    let stages = match cli.command {
        Command::TrainBase => vec![Stage::TrainBase],
        Command::Means => vec![Stage::Means],
        Command::TrainMask => vec![Stage::TrainMask],
        Command::Round => vec![Stage::Round],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Baseline { kind } => vec![Stage::Baseline(kind)],
        Command::Report { .. } => vec![Stage::Report],
        Command::ExportDot => vec![Stage::ExportDot],
        Command::RunAll => Stage::all(),
    };
    pipeline.run_stages(&stages)?;
    println!("{}", pipeline.manifest_path().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
