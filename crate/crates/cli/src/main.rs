//! `teamring` — verify, trace, estimate and search commands over a
//! declarative run configuration.
//!
//! Exit codes: 0 success, 1 tolerance or accounting failure, 2
//! configuration error.

mod commands;
mod config;
mod report;

use clap::{Parser, Subcommand, ValueEnum};
use commands::CmdError;
use report::{Format, Sink};
use std::path::PathBuf;
use std::process::ExitCode;
use teamring_core::scheduler::Profiler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfilerArg {
    Analytic,
    Measured,
}

impl From<ProfilerArg> for Profiler {
    fn from(p: ProfilerArg) -> Self {
        match p {
            ProfilerArg::Analytic => Profiler::Analytic,
            ProfilerArg::Measured => Profiler::Measured,
        }
    }
}

#[derive(Parser)]
#[command(name = "teamring", version, about = "simulator and planner for multi-ring sequence-parallel attention")]
struct Cli {
    /// Path to the TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for report files (default: stdout)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// Overrides run.seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Profiler for trace and search
    #[arg(long, global = true, value_enum, default_value_t = ProfilerArg::Measured)]
    profiler: ProfilerArg,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run forward + backward against the single-device oracles
    Verify,
    /// Execute and export the communication trace with exactness checks
    Trace,
    /// Emit closed-form cost reports and savings tables
    Estimate,
    /// Grid-search (C, placement) and print the ranked table
    Search,
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CmdError::Config("--config <path> is required".into()))?;
    let mut cfg = config::load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = Some(seed);
    }
    let sink = Sink::new(cli.out.as_deref())?;
    let profiler: Profiler = cli.profiler.into();
    match cli.command {
        Command::Verify => commands::cmd_verify(&cfg, &sink, cli.format),
        Command::Trace => commands::cmd_trace(&cfg, &sink, cli.format, profiler),
        Command::Estimate => commands::cmd_estimate(&cfg, &sink, cli.format),
        Command::Search => commands::cmd_search(&cfg, &sink, cli.format, profiler),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Failure(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
        Err(CmdError::Config(msg)) => {
            eprintln!("configuration error: {}", msg);
            ExitCode::from(2)
        }
    }
}
