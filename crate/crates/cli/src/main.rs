//! Single executable for the covert-channel laboratory: simulation,
//! bound verification, detection games, codebook design, poison-data
//! generation, text metrics, and embedding analysis.
//!
//! Exit codes: 0 success, 1 failed verification or pipeline error,
//! 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(name = "stegolab", version, about = "Latent-space covert channel laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML or JSON config file; a previous run's manifest.json also works
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParallelArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Worker threads; results are identical for every worker count
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    parallel: ParallelArgs,
    /// Completion oracle backing the pipeline
    #[arg(long, value_parser = ["mock", "http"])]
    oracle: Option<String>,
    /// Chat-completions endpoint for the http oracle
    #[arg(long)]
    oracle_url: Option<String>,
    /// Model name for the http oracle
    #[arg(long)]
    oracle_model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Channel encode/decode round trips; per-trial CSV plus bound summary
    Simulate(CommonArgs),
    /// Run Monte Carlo experiment specs; nonzero exit on any failed verdict
    Verify(ParallelArgs),
    /// Play the stego-vs-cover distinguishing game with the matched filter
    Detect(ParallelArgs),
    /// Generate or inspect a codebook and its closed-form bounds
    Codebook(CommonArgs),
    /// Build a poisoned instruction-tuning dataset (phases 1-3, mixing, paraphrase)
    Poison(OracleArgs),
    /// Text and score metrics: pairs, threshold sweeps, perplexity filter, separability
    Metrics(CommonArgs),
    /// Embedding-space analysis of a labeled vector file
    Analyze(CommonArgs),
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

impl ParallelArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            workers: self.workers,
            ..self.common.overrides()
        }
    }
}

impl OracleArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            oracle: self.oracle.clone(),
            oracle_url: self.oracle_url.clone(),
            oracle_model: self.oracle_model.clone(),
            ..self.parallel.overrides()
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Simulate(args) => {
            commands::simulate::run(args.config.as_deref(), &args.overrides())
        }
        Command::Verify(args) => {
            commands::verify::run(args.common.config.as_deref(), &args.overrides())
        }
        Command::Detect(args) => {
            commands::detect::run(args.common.config.as_deref(), &args.overrides())
        }
        Command::Codebook(args) => {
            commands::codebook::run(args.config.as_deref(), &args.overrides())
        }
        Command::Poison(args) => {
            commands::poison::run(args.parallel.common.config.as_deref(), &args.overrides())
        }
        Command::Metrics(args) => {
            commands::metrics::run(args.config.as_deref(), &args.overrides())
        }
        Command::Analyze(args) => {
            commands::analyze::run(args.config.as_deref(), &args.overrides())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
