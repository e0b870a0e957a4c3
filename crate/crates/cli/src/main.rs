//! `ddn-lab`: data generation, training, evaluation, ablations and loss
//! weight search for domain expert networks on synthetic domains.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "ddn-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted `section.key=value` override, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target datasets plus the spec document.
    GenData(Common),
    /// Train on the source domains; write checkpoint, bank and log.
    Train(Common),
    /// Train, then write the evaluation report and target predictions.
    Eval(Common),
    /// Leave-one-out comparison of model variants and a batch-size sweep.
    Ablate(Common),
    /// Random search over the contrastive loss weight.
    Search(Common),
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DDN_LAB_THREADS") {
        let n: usize = v.parse().context("DDN_LAB_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    let (name, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Search(c) => ("search", c),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .context("no output directory: pass --out or set `out` in the config")?;

    let started = unix_now();
    let clock = Instant::now();
    let art = match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg)?,
        Command::Train(_) => commands::train_cmd(&cfg)?,
        Command::Eval(_) => commands::eval_cmd(&cfg)?,
        Command::Ablate(_) => commands::ablate_cmd(&cfg)?,
        Command::Search(_) => commands::search_cmd(&cfg)?,
    };
    art.write_all(&out)?;
    let stamp = serde_json::json!({
        "command": name,
        "started_unix": started,
        "finished_unix": unix_now(),
        "wall_secs": clock.elapsed().as_secs_f64(),
    });
    std::fs::write(out.join("timestamps.json"), format!("{stamp}\n"))?;

    for f in &art.failures {
        eprintln!("check failed: {f}");
    }
    println!("{name}: wrote {} to {}", art.names().join(", "), out.display());
    Ok(art.failures.is_empty())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
