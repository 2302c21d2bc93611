//! `geoscore`: synthesize stamps, train transformation classifiers, score,
//! select transformations and evaluate, with every artifact tracked by a
//! manifest.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::RunContext;
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "geoscore",
    version,
    about = "Transformation-based anomaly detection for image stamps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate the synthetic benchmark for every seed.
    Synth(Common),
    /// Train one transformation classifier per catalog and seed.
    Train(Common),
    /// Fit the Dirichlet scorer and threshold, then score the test split.
    Score(Common),
    /// Prune the selection catalog with pairwise discrimination classifiers.
    Select(Common),
    /// Compute metrics per run and the aggregate table.
    Eval(Common),
    /// Collect the aggregate table and selection results into one document.
    Report(Common),
    /// synth, train, score, eval and report in sequence.
    Pipeline(Common),
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output root (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run stages even when their manifests are up to date.
    #[arg(long)]
    force: bool,
    /// Leave clock readings out of manifests so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads.
    #[arg(long, env = "GEOSCORE_JOBS")]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let command = Cli::parse().command;
    let common = match &command {
        Command::Synth(c)
        | Command::Train(c)
        | Command::Score(c)
        | Command::Select(c)
        | Command::Eval(c)
        | Command::Report(c)
        | Command::Pipeline(c) => c.clone(),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    // catch unknown catalogs before any work starts
    cfg.catalogs()?;
    let ctx = RunContext {
        root: cfg.out_dir.clone(),
        cfg,
        force: common.force,
        deterministic: common.deterministic,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.jobs {
        anyhow::ensure!(n > 0, "--jobs must be at least 1");
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting the worker pool")?;
    pool.install(|| match command {
        Command::Synth(_) => commands::synth(&ctx),
        Command::Train(_) => commands::train_all(&ctx),
        Command::Score(_) => commands::score_all(&ctx),
        Command::Select(_) => commands::select_all(&ctx),
        Command::Eval(_) => commands::eval_all(&ctx),
        Command::Report(_) => commands::report(&ctx),
        Command::Pipeline(_) => commands::pipeline(&ctx),
    })
}
