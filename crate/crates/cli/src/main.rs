//! `alden`: phantom generation, dose simulation, training, denoising and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
//! failure, 4 checkpoint mismatch, 5 output collision.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Collision(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] alden_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Collision(_) => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &alden_core::Error) -> u8 {
    use alden_core::Error as E;
    match e {
        E::InSample { source, .. } => core_exit_code(source),
        E::Config(_) | E::InvalidArgument(_) | E::Manifest { .. } | E::BackboneLoad(_) => 2,
        E::Numeric(_) | E::NonFiniteLoss { .. } => 3,
        E::CheckpointVersion { .. } | E::CorruptCheckpoint { .. } | E::CheckpointMismatch(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "alden", version, about = "Anatomy-aware low-dose CT denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted override applied after the config file, e.g. `objective.tau=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Seed of this command's random process (phantoms, dose noise or training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic normal-dose phantom slices and a manifest.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a low-dose counterpart for every slice of a manifest.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of the full-dose photon count.
        #[arg(long)]
        dose: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator on a paired manifest.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Paired manifest; overrides `data.train_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Objective preset: baseline, aad-only, scl-only or full.
        #[arg(long)]
        ablate: Option<String>,
        /// Stop after this many iterations instead of `total_iterations`.
        #[arg(long)]
        iterations: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Denoise every slice of a manifest with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a paired manifest, raw or through one or more checkpoints.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Report path (JSON lines); a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Repeat to compare several checkpoints.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated presets naming each checkpoint's row.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PhantomGen { out, count, size, common } => commands::phantom_gen(&common, &out, count, size),
        Command::Simulate { manifest, out, dose, common } => commands::simulate(&common, &manifest, &out, dose),
        Command::Train {
            out,
            manifest,
            resume,
            ablate,
            iterations,
            common,
        } => commands::train(
            &common,
            &commands::TrainArgs {
                out,
                manifest,
                resume,
                ablate,
                iterations,
            },
        ),
        Command::Denoise {
            checkpoint,
            manifest,
            out,
            common,
        } => commands::denoise(&common, &checkpoint, &manifest, &out),
        Command::Evaluate {
            manifest,
            out,
            checkpoint,
            ablate,
            common,
        } => commands::evaluate(&common, &manifest, &out, &checkpoint, &ablate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
