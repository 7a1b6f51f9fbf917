mod common;
mod config;
mod enhance;
mod evaluate;
mod probe;
mod simulate;
mod train;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pase_core::Error as CoreError;
use tracing_subscriber::EnvFilter;

use crate::config::ConfigError;

/// Exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const MISSING_ASSET: u8 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "pase", version, about = "Generative speech enhancement toolkit")]
struct Cli {
    /// Directory for artifacts and the resolved-config snapshot.
    #[arg(long = "output-dir", visible_alias = "output_dir", global = true, default_value = "pase_out")]
    output_dir: PathBuf,
    /// Directory holding downloaded pretrained assets.
    #[arg(long, env = pase_core::assets::ASSET_DIR_ENV, global = true)]
    asset_dir: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter, e.g. `info` or `pase_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Single-threaded numerics and sequential client calls.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a paired noisy/clean test set from corpus manifests.
    Simulate(simulate::SimulateArgs),
    /// Distil a denoising encoder from a frozen teacher.
    TrainDrd(train::TrainArgs),
    /// Train the dual-stream vocoder on a frozen encoder.
    TrainVocoder(train::TrainArgs),
    /// Enhance noisy WAV files.
    Enhance(enhance::EnhanceArgs),
    /// Representation probes: rfs, mrs, pnmi, orthogonality.
    Probe(probe::ProbeArgs),
    /// Score enhanced audio against references.
    Evaluate(evaluate::EvaluateArgs),
}

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Globals {
    pub output_dir: PathBuf,
    pub asset_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::InvalidArgument(_) => exit::CONFIG,
                CoreError::MissingAsset(_) => exit::MISSING_ASSET,
                CoreError::NonFiniteLoss { .. } | CoreError::Tensor(_) => exit::NUMERIC,
                _ => exit::DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return exit::DATA;
        }
    }
    exit::OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // Must happen before the first tensor op builds the thread pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();

    let g = Globals {
        output_dir: cli.output_dir,
        asset_dir: cli.asset_dir,
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a, &g),
        Command::TrainDrd(a) => train::run_drd(a, &g),
        Command::TrainVocoder(a) => train::run_vocoder(a, &g),
        Command::Enhance(a) => enhance::run(a, &g),
        Command::Probe(a) => probe::run(a, &g),
        Command::Evaluate(a) => evaluate::run(a, &g),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let code = exit_code(&e);
            tracing::error!(exit_code = code, "{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
