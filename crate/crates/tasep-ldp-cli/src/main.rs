//! `tasep-ldp`: experiment driver over the simulation, Hopf–Lax, speed construction,
//! Doob and entropy modules.

mod artifact;
mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tasep-ldp", version, about = "Large-deviation experiments for TASEP and corner growth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (default: `out_dir` of the config, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Worker threads for replica loops.
    #[arg(long, global = true, env = "TASEP_LDP_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Scaled simulations against the Hopf–Lax solution along a list of N.
    Hydro,
    /// Flux and relative entropy of a tilted torus.
    Tilt,
    /// Flux and entropy of the intermittent speed construction.
    Intermittent,
    /// Builds the simple speed function of a piecewise-linear profile.
    SpeedBuild,
    /// Dynamic-programming Hopf–Lax solve, optionally against a closed form.
    Hopflax,
    /// Exact versus forward-pass entropy of a conditioned finite system.
    DoobCheck,
    /// Rate functional of a field.
    RateEval,
    /// One-block statistic for a list of block widths.
    Oneblock,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::Context::load(cli.config.as_deref(), cli.out, cli.seed, cli.replicas).and_then(|ctx| {
        if let Some(t) = cli.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
        commands::run(cli.command, &ctx)
    });
    match result {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // A closed stdout (e.g. piped into `head`) does not fail the run.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
