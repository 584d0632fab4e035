//! `branchgan` command-line tool.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors (including
//! bad flags), 3 for failures while running.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<branchgan::Error> for CliError {
    fn from(e: branchgan::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Wraps an error from reading user inputs as a configuration error.
pub fn input_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "branchgan", version, about = "Branched progressive GAN toolkit")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that resolve a full run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Profile defaults: paper256, paper512, paper400x300 or desk.
    #[arg(long)]
    pub profile: Option<branchgan::Profile>,
    /// TOML file overriding profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on PNG/JPEG files in this directory.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on N synthetic images.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the synthetic corpus.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Progressive training with stage checkpoints and logs.
    Train(commands::TrainArgs),
    /// Variance-by-scale report for a checkpoint.
    Vbs(commands::VbsArgs),
    /// Replace one sub-vector by p times the all-ones vector.
    Sweep(commands::SweepArgs),
    /// Combine sub-vectors of two latents.
    Fuse(commands::FuseArgs),
    /// Fit a latent to color, mask and edge constraints.
    Edit(commands::EditArgs),
    /// Train a projection encoder for a generator checkpoint.
    TrainEncoder(commands::EncoderArgs),
    /// Branch suppression experiments.
    Suppress(commands::SuppressArgs),
    /// Write the synthetic three-layer corpus as PNG files.
    SynthData(commands::SynthArgs),
    /// Start the HTTP service.
    Serve(commands::ServeArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.quiet {
            tracing::Level::WARN
        } else {
            tracing::Level::INFO
        })
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("branchgan: {e}");
            ExitCode::from(e.code())
        }
    }
}
