//! `ltccd`: command-line driver for the damage-monitoring pipeline.
//!
//! Exit codes: 0 success, 1 stage failure, 2 usage error, 3 configuration error.

mod config;
mod stages;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ltccd", version, about = "Long-arc coherent change detection for building damage")]
struct Cli {
    /// TOML run configuration; relative paths resolve against its directory.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set detector.k=-0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads for raster work and downloads (default: all cores).
    #[arg(short, long, global = true)]
    jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic archive, coherence rasters, footprints and reference points.
    Simulate,
    /// Plan conflict, pre-war and counterfactual stacks for every timestep.
    Plan,
    /// Request coherence products for every planned pair from the processing service.
    Fetch,
    /// Reduce each planned stack to mean, std and count rasters.
    Reduce,
    /// Classify every timestep and confirm persistent damage.
    Detect,
    /// Write per-timestep and monitoring validity masks.
    Mask,
    /// Roll pixel detections up to buildings and regional time series.
    Aggregate,
    /// Score detections against reference points.
    Evaluate,
    /// Compare coherence distributions over a stable region.
    Stability,
    /// Render charts and the agreement table.
    Report,
    /// Run plan through report on existing inputs.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<ConfigError>().is_some() {
        return (3, "config");
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ltccd::Error>() {
            return match e {
                ltccd::Error::Config(_) => (3, "config"),
                other => (1, other.kind()),
            };
        }
    }
    (1, "stage")
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_all(cfg: &RunConfig) -> Result<()> {
    let plans = stages::plan(cfg)?;
    tracing::info!(timesteps = plans.len(), "planned");
    print(&stages::reduce(cfg)?)?;
    let index = stages::detect(cfg)?;
    tracing::info!(timesteps = index.timesteps.len(), "detected");
    print(&stages::mask(cfg)?)?;
    print(&stages::aggregate(cfg)?)?;
    print(&stages::evaluate(cfg)?)?;
    print(&stages::stability(cfg)?)?;
    print!("{}", stages::report(cfg)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ConfigError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Simulate => print(&stages::simulate(&cfg)?),
        Command::Plan => {
            let plans = stages::plan(&cfg)?;
            let sizes: Vec<_> = plans
                .iter()
                .map(|p| serde_json::json!({ "timestep": p.conflict.timestep_date, "pairs": p.conflict.len() }))
                .collect();
            print(&sizes)
        }
        Command::Fetch => {
            let mut builder = tokio::runtime::Builder::new_multi_thread();
            builder.enable_all();
            if let Some(n) = cli.jobs {
                builder.worker_threads(n);
            }
            let runtime = builder.build()?;
            let summary = stages::fetch(&cfg, &runtime)?;
            print(&summary)
        }
        Command::Reduce => print(&stages::reduce(&cfg)?),
        Command::Detect => print(&stages::detect(&cfg)?),
        Command::Mask => print(&stages::mask(&cfg)?),
        Command::Aggregate => print(&stages::aggregate(&cfg)?),
        Command::Evaluate => print(&stages::evaluate(&cfg)?),
        Command::Stability => print(&stages::stability(&cfg)?),
        Command::Report => {
            print!("{}", stages::report(&cfg)?);
            Ok(())
        }
        Command::Run => run_all(&cfg),
        Command::ShowConfig => {
            print!("{}", toml::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let line = ErrorLine {
                error: kind,
                message: format!("{err:#}"),
            };
            eprintln!("{}", serde_json::to_string(&line).unwrap_or_else(|_| format!("{err:#}")));
            ExitCode::from(code)
        }
    }
}
