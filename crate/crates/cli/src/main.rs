use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod report;
mod rundir;

/// Simulate prevalence-biased crowds, aggregate, recalibrate and score them.
#[derive(Parser, Debug)]
#[command(name = "crowdcal", version, about)]
struct Cli {
    /// TOML experiment config; omitted keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; falls back to `output_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set aggregation.k=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulated judgment tables and corpora.
    Simulate,
    /// BC and EB crowd datasets.
    Aggregate,
    /// Recalibrated judgments, rEB datasets and fitted parameters.
    Recalibrate,
    /// Metric and calibration-curve tables, or score an existing WoC CSV.
    Evaluate {
        /// WoC CSV (`replicate,variant,item_id,label`) to score instead of simulating.
        #[arg(long, requires = "truth")]
        woc: Option<PathBuf>,
        /// Truth CSV (`item_id,true_label`, or a corpus CSV).
        #[arg(long, requires = "woc")]
        truth: Option<PathBuf>,
    },
    /// Downstream model metrics, chosen configs and weights.
    Train,
    /// Crowd-size sweep tables.
    Sweep,
    /// The full eight-variant study with every artifact and the report.
    #[command(name = "reproduce-study2")]
    ReproduceStudy2,
    /// Text and JSON summary, from a previous run or computed afresh.
    Report {
        /// Earlier run directory holding report.json.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Aggregate => "aggregate",
            Command::Recalibrate => "recalibrate",
            Command::Evaluate { .. } => "evaluate",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::ReproduceStudy2 => "reproduce-study2",
            Command::Report { .. } => "report",
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("invalid config")?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| anyhow!("no run directory: pass --out or set output_dir"))?;
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    let config_text = config::to_toml(&cfg)?;
    let hash = config::hash(&cfg)?;
    let mut dir = rundir::RunDir::create(&out, cli.command.name(), hash.clone())?;
    dir.write("config.toml", config_text.as_bytes())?;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut dir)?,
        Command::Aggregate => commands::aggregate(&cfg, &mut dir)?,
        Command::Recalibrate => commands::recalibrate(&cfg, &mut dir)?,
        Command::Evaluate { woc: Some(woc), truth: Some(truth) } => commands::evaluate_external(&cfg, woc, truth, &mut dir)?,
        Command::Evaluate { .. } => commands::evaluate(&cfg, &mut dir)?,
        Command::Train => commands::train(&cfg, &mut dir)?,
        Command::Sweep => commands::sweep(&cfg, &mut dir)?,
        Command::ReproduceStudy2 => commands::reproduce(&cfg, &hash, &mut dir)?,
        Command::Report { from } => commands::report(&cfg, &hash, from.as_deref(), &mut dir)?,
    }
    let manifest = dir.finish()?;
    log::info!("{} artifacts in {:.1}s", manifest.artifacts.len(), manifest.elapsed_seconds);
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
