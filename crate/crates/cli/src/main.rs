//! Command-line surface for the transformer laboratory.
//!
//! Exit codes: 0 when the command succeeds, 2 when the run configuration is
//! invalid (unknown or missing keys, bad values, unsupported layout for the
//! requested analysis), 3 when a valid run fails while executing.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "deepscale",
    about = "Desk-scale transformer laboratory: depth-scaled initialization and merged attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a synthetic task; writes metrics.csv, dynamics.csv, checkpoints
    Train(RunArgs),
    /// Probe error-signal ratios and gradient norms for Glorot and DS-Init
    Analyze(RunArgs),
    /// Decode token-id lines from a file using a trained checkpoint
    Decode(DecodeArgs),
    /// Compare decode throughput and training step time across decoder variants
    Bench(RunArgs),
    /// Average two or more checkpoints into one parameter file
    Avg(AvgArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of key=value lines; flags below override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for CSV artifacts and checkpoints
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    overrides: config::Overrides,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Trained checkpoint whose parameters to load
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// One whitespace-separated token-id sequence per line
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

#[derive(Args)]
struct AvgArgs {
    /// Checkpoints to average
    #[arg(required = true, value_name = "FILE")]
    checkpoints: Vec<PathBuf>,
    /// Where to write the averaged checkpoint
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            commands::cmd_train(&cfg, &a.out)
        }
        Cmd::Analyze(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            commands::cmd_analyze(&cfg, &a.out)
        }
        Cmd::Decode(a) => {
            let cfg = config::load(a.run.config.as_deref(), &a.run.overrides)?;
            commands::cmd_decode(&cfg, &a.checkpoint, &a.input)
        }
        Cmd::Bench(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            commands::cmd_bench(&cfg, &a.out)
        }
        Cmd::Avg(a) => commands::cmd_avg(&a.checkpoints, &a.output),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}
