//! `mevit`: run schedules, audits, sweeps and estimates from the command line.
//!
//! Exit status is 0 on success, 1 on usage or configuration errors and 2 when
//! a checked property or the single-load audit fails.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub const OUT_DIR_ENV: &str = "MEVIT_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mevit_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) | CliError::Core(mevit_core::Error::AuditFailed(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mevit", version, about = "Single-load ViT accelerator simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Builtin model label (vit-b, deit-b, deit-s, deit-t).
    #[arg(long, global = true, default_value = "deit-b")]
    pub model: String,
    /// Model config file (key = value); overrides --model.
    #[arg(long, global = true)]
    pub model_config: Option<PathBuf>,
    /// Hardware config file (key = value).
    #[arg(long, global = true)]
    pub hw_config: Option<PathBuf>,
    /// Systolic array size.
    #[arg(long, global = true)]
    pub psys: Option<usize>,
    /// Clock frequency in Hz.
    #[arg(long, global = true)]
    pub freq: Option<f64>,
    /// Off-chip bandwidth cap in bytes/s.
    #[arg(long, global = true)]
    pub bandwidth: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = PolicyArg::MeVit)]
    pub policy: PolicyArg,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "mevit-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Sampled instead of exhaustive checks.
    #[arg(long, global = true)]
    pub quick: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    MeVit,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Average,
    PeakMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Packing,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Schedule one inference, audit it and write cycle, traffic and trace files.
    Simulate,
    /// Run the packing, numeric and schedule-equivalence checks.
    Verify {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Design-space sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Single-load vs baseline traffic and improvement ratios.
    Traffic,
    /// BRAM36 bank estimate.
    Bram,
}

#[derive(Debug, Subcommand)]
pub enum SweepKind {
    /// Padding efficiency over the array size.
    Efficiency {
        /// Inclusive range, `a..b`.
        #[arg(long = "p", default_value = "4..80")]
        range: String,
    },
    /// Throughput of k processing elements under the bandwidth cap.
    MultiPe {
        #[arg(long = "k", default_value = "1..6")]
        range: String,
        #[arg(long, value_enum, default_value_t = BasisArg::Average)]
        basis: BasisArg,
    },
    /// One roofline point per builtin model.
    Roofline {
        /// Processing elements per point.
        #[arg(long, default_value_t = 1)]
        pes: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate => commands::simulate(&cli.common),
        Command::Verify { inject_fault } => commands::verify(&cli.common, inject_fault),
        Command::Sweep { kind } => commands::sweep(&cli.common, &kind),
        Command::Traffic => commands::traffic(&cli.common),
        Command::Bram => commands::bram(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mevit: {e}");
            if matches!(e, CliError::Usage(_) | CliError::Core(mevit_core::Error::UnknownModel(_))) {
                eprintln!("Usage: mevit [OPTIONS] <simulate|verify|sweep|traffic|bram>; see `mevit --help`");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
