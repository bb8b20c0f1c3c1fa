//! `stackstep`: experiment runner for two-time-scale training of layered
//! objectives.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "stackstep", version, about = "Two-time-scale SGD experiments, gradient checks and landscape slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Without it the built-in defaults are used.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated seeds; replaces every seed list in the config.
    #[arg(long, value_delimiter = ',', value_name = "a,b,c")]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic gradients against finite differences.
    Gradcheck(Common),
    /// Non-uniform and two uniform arms per seed, with a comparison summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Estimate the problem constants and reject schedules that break
        /// the theorem conditions.
        #[arg(long)]
        strict_schedule: bool,
    },
    /// Log-log slope of a trace column, averaged over files.
    Ratefit {
        #[command(flatten)]
        common: Common,
        /// Column to fit; overrides `ratefit.quantity`.
        #[arg(long)]
        quantity: Option<String>,
        /// Overrides `ratefit.tail_fraction`.
        #[arg(long)]
        tail_fraction: Option<f64>,
        /// Trace CSVs; override `ratefit.traces`.
        traces: Vec<PathBuf>,
    },
    /// Paired joint and Stackelberg slices at trajectory checkpoints.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// A trajectory file written by `train`.
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
    },
    /// Gradient TD with a two-layer value network.
    Tdc(Common),
    /// Estimates (or echoes) the problem constants and checks the schedule.
    Constants(Common),
    /// Runs a named seeded study and checks its pass criterion.
    Study {
        #[command(flatten)]
        common: Common,
        /// three_arm, stationarity, toy_rate, landscape or frozen_tdc.
        name: String,
    },
}

fn load(common: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            schema_version: Some(config::SCHEMA_VERSION),
            ..Default::default()
        },
    };
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            return Err(CliError::Config("--seeds must list at least one seed".into()));
        }
        cfg.override_seeds(seeds.clone());
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("STACKSTEP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("STACKSTEP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Gradcheck(c) => {
            let (cfg, out) = load(&c)?;
            commands::gradcheck(&cfg, &out).map(drop)
        }
        Command::Train { common, strict_schedule } => {
            let (cfg, out) = load(&common)?;
            commands::train(&cfg, &out, strict_schedule).map(drop)
        }
        Command::Ratefit {
            common,
            quantity,
            tail_fraction,
            traces,
        } => {
            let (cfg, out) = load(&common)?;
            let files = if traces.is_empty() { cfg.ratefit.traces.clone() } else { traces };
            let quantity = quantity.unwrap_or_else(|| cfg.ratefit.quantity.clone());
            let tail = tail_fraction.unwrap_or(cfg.ratefit.tail_fraction);
            let out = common.out.as_ref().map(|_| out);
            commands::ratefit(&files, &quantity, tail, out.as_deref()).map(drop)
        }
        Command::Landscape { common, trajectory } => {
            let (mut cfg, out) = load(&common)?;
            if trajectory.is_some() {
                cfg.landscape.trajectory = trajectory;
            }
            commands::landscape(&cfg, &out).map(drop)
        }
        Command::Tdc(c) => {
            let (cfg, out) = load(&c)?;
            commands::tdc(&cfg, &out).map(drop)
        }
        Command::Constants(c) => {
            let (cfg, out) = load(&c)?;
            commands::constants(&cfg, &out).map(drop)
        }
        Command::Study { common, name } => {
            let (cfg, out) = load(&common)?;
            commands::study(&name, &cfg, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stackstep: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
