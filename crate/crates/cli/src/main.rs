//! `gsir`: fit Gaussians, bake occlusion and illumination, decompose materials.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsir_core::par;

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("malformed config: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Core(#[from] gsir_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "gsir", version, about = "Gaussian splatting inverse rendering pipeline")]
#[command(after_help = "Set GSIR_THREADS to cap the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth and an initial cloud
    Synth(RunArgs),
    /// Fit Gaussians with regularized normals; writes cloud.ply and log.jsonl
    FitGeometry(RunArgs),
    /// Bake occlusion and illumination volumes from cloud.ply; writes volumes.gsirvol
    Bake(RunArgs),
    /// Recover materials and the environment; updates cloud.ply and writes env.pfm
    Decompose(RunArgs),
    /// Render the chosen channels for the chosen views into renders/
    Render(RunArgs),
    /// Re-render under another environment map into renders/{view}_relit.png
    Relight(RunArgs),
    /// Print PSNR/SSIM/MAE of the renders against the dataset as JSON
    Eval(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn workers() -> Result<Option<usize>, CliError> {
    match std::env::var("GSIR_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("GSIR_THREADS must be a non-negative integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, f): (&RunArgs, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Synth(a) => (a, commands::synth),
        Command::FitGeometry(a) => (a, commands::fit_geometry),
        Command::Bake(a) => (a, commands::bake),
        Command::Decompose(a) => (a, commands::decompose),
        Command::Render(a) => (a, commands::render),
        Command::Relight(a) => (a, commands::relight),
        Command::Eval(a) => (a, commands::eval),
    };
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides).map_err(CliError::Config)?;
    let threads = workers()?;
    par::with_workers(threads, || f(&cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gsir: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
