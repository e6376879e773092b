mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use evgraph::model::Mode;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "evgraph", version, about = "Event-graph inference, labeling, training and performance reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// real | integer
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Per-sample class probabilities and accuracy.
    Classify,
    /// Per-window keyword outputs and KWS metrics.
    Kws,
    /// Keyword segments from event histograms.
    Label,
    /// Train a model and write a checkpoint.
    Train,
    /// Cycle, latency, throughput and parameter report.
    Perf,
    /// Metrics from a saved predictions file.
    Eval,
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let cmd = cli.cmd;
    evgraph::par::with_workers(cfg.workers, || match cmd {
        Cmd::Classify => run::classify(&cfg),
        Cmd::Kws => run::kws(&cfg),
        Cmd::Label => run::label(&cfg),
        Cmd::Train => run::train_cmd(&cfg),
        Cmd::Perf => run::perf(&cfg),
        Cmd::Eval => run::eval(&cfg),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
