//! `ppde`: run scenarios, write reports, replay them.

mod report;
mod run;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run::Stage;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn schema(field: impl AsRef<str>, reason: impl AsRef<str>) -> Self {
        Self::Schema(format!("{}: {}", field.as_ref(), reason.as_ref()))
    }

    pub fn missing_block(block: &str, command: &str) -> Self {
        Self::Schema(format!("missing block `{block}` required by `{command}`"))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Schema(_) => 2,
            Self::Numerical(_) => 3,
            Self::CheckFailed(_) | Self::Mismatch(_) => 4,
        }
    }
}

impl From<ppde_core::Error> for CliError {
    fn from(e: ppde_core::Error) -> Self {
        match e {
            ppde_core::Error::InvalidParameter { name, reason } => Self::schema(name, reason),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ppde", version, about = "Path-dependent SDE / PPDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble, moments and the flow check.
    Simulate(RunArgs),
    /// Solve the PPDE by windowed Picard iteration (and BSDE if enabled).
    Solve(RunArgs),
    /// Solve, then run the martingale, shift and comparison checks.
    Verify(RunArgs),
    /// Optimal stopping.
    Stop(RunArgs),
    /// Stochastic control: value, DPP and HJB checks.
    Control(RunArgs),
    /// Every stage whose block is present.
    All(RunArgs),
    /// Re-run a previous report and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides $WORKERS.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Directory holding `report.json`.
    dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let (stage, args) = match cli.command {
        Command::Replay(a) => {
            if let Some(w) = a.workers {
                ppde_core::parallel::set_workers(w);
            }
            return run::replay(&a.dir, a.seed);
        }
        Command::Simulate(a) => (Stage::Simulate, a),
        Command::Solve(a) => (Stage::Solve, a),
        Command::Verify(a) => (Stage::Verify, a),
        Command::Stop(a) => (Stage::Stop, a),
        Command::Control(a) => (Stage::Control, a),
        Command::All(a) => (Stage::All, a),
    };
    if let Some(w) = args.workers {
        ppde_core::parallel::set_workers(w);
    }
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let scenario = scenario::Scenario::parse(&text)?;
    let report = run::run_scenario(scenario, stage, args.seed, &args.out)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(format!("{} checks passed; report in {}", report.checks.len(), args.out.display()))
    } else {
        Err(CliError::CheckFailed(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            report.checks.len(),
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ppde: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
