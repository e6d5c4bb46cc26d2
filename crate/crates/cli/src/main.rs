//! Command-line driver: generate data, train, infer and analyse.

mod commands;
mod experiment;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densediff::{Error, Result};

use commands::{AnalysisKind, InferArgs};
use experiment::{ExperimentFile, Resolved};

#[derive(Parser)]
#[command(name = "densediff", version, about = "Diffusion-based dense prediction at desk scale")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ExpArgs {
    /// Experiment file (JSON).
    #[arg(long)]
    exp: PathBuf,
    /// Output directory, overriding the experiment file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed, overriding the experiment file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<Resolved> {
        let exp = ExperimentFile::load(&self.exp)?;
        let base = self.exp.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        exp.resolve(base, self.out.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and held-out datasets.
    GenerateData(ExpArgs),
    /// Train the experiment's protocol and write a checkpoint and log.
    Train(ExpArgs),
    /// Predict an annotation for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (PFM, 1 or 3 channels in [0, 1]).
        #[arg(long)]
        image: PathBuf,
        /// Number of noise seeds (generative models only).
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce analysis artifacts.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[command(flatten)]
        exp: ExpArgs,
        /// Checkpoint to analyse (default: the experiment's own).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::GenerateData(a) => commands::generate_data(&a.resolve()?),
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Infer { ckpt, image, seeds, seed, out } => {
            let written = commands::infer(&InferArgs { ckpt: &ckpt, image: &image, seeds, seed, out: &out })?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Analyze { kind, exp, ckpt } => commands::analyze(kind, &exp.resolve()?, ckpt.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
