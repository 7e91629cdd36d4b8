//! `flylora`: projection and gradient checks, training, merging, sweeps and
//! report conversion. Exit status is 0 on success, 1 on a violated bound or
//! runtime failure, 2 on a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "flylora", version, about = "Sparse frozen-projection LoRA experiments")]
pub struct Cli {
    /// Directory that receives every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Global seed; wins over config files and `FLYLORA_SEED`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Thm1,
    Thm2,
    Thm3,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sparse projection and write it as `projection.flymat`.
    GenProj {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        r: usize,
        /// Nonzeros per row; defaults to n/4.
        #[arg(long)]
        p: Option<usize>,
    },
    /// Check projection and covariance bounds numerically.
    Verify {
        #[arg(value_enum)]
        which: Check,
        #[command(flatten)]
        args: VerifyArgs,
    },
    /// Compare analytic B gradients against central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every variant on every task and seed.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Merge per-task adapters and measure interference.
    Merge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Split-LoRA granularity grid at fixed total and activated rank.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-emit a result table in another format with per-group means.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
