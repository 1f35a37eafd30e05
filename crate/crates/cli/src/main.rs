//! Command-line harness for the memory heat-equation engine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::RunContext;

#[derive(Parser)]
#[command(name = "memheat", version, about = "Stochastic reaction-diffusion with memory: validation and experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensembles (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; falls back to `$OUTPUT_DIR`, then `./output`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run every validator and print the certified constants.
    Validate,
    /// Integrate an ensemble and write trajectories and monitors.
    Simulate,
    /// Time-average a single long path for stationary moments.
    Measure,
    /// Couple a reference path to a nudged copy and check contraction.
    Nudge,
    /// Compare the linear noiseless engine with the exact per-mode reduction.
    OracleCheck,
    /// Compare stationary regularity under smooth and rough noise.
    Regularity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Measure => "measure",
            Command::Nudge => "nudge",
            Command::OracleCheck => "oracle-check",
            Command::Regularity => "regularity",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(path) = cli.config else {
        anyhow::bail!("--config is required");
    };
    let loaded = config::load(&path)?;
    let out = cli
        .output_dir
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"));
    let ctx = RunContext {
        seed: cli.seed.unwrap_or(loaded.config.run.seed),
        loaded,
        threads: cli.threads,
        out,
        command: cli.command.name(),
    };
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Measure => commands::measure(&ctx),
        Command::Nudge => commands::nudge(&ctx),
        Command::OracleCheck => commands::oracle_check(&ctx),
        Command::Regularity => commands::regularity(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
