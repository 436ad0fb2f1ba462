//! `mftf`: layout-controlled generation, text-guided segmentation, metric
//! evaluation and trace inspection.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad job, unknown
//! token, missing input), 3 for backend or runtime failures.

mod backend;
mod error;
mod evaluate;
mod generate;
mod inspect;
mod segment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Toy,
    Ldm,
}

#[derive(Debug, Parser)]
#[command(name = "mftf", version, about = "Object layout control for diffusion models")]
pub struct Cli {
    #[arg(long, value_enum, default_value = "toy", global = true)]
    pub backend: BackendKind,

    /// Run seed; overrides the job's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `cpu`, `cuda`, `cuda:N` or `metal` (ldm backend only).
    #[arg(long, default_value = "cpu", global = true)]
    pub device: String,

    /// Output directory (for `evaluate`, the metrics CSV path).
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a layout-control job.
    Generate {
        /// Job JSON file.
        job: PathBuf,
        /// Comma-separated seeds; one output subdirectory per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write every captured attention tensor as `.npy`.
        #[arg(long)]
        dump_tensors: bool,
    },
    /// Segment an image by prompt tokens.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Comma-separated words or token indices.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<String>,
        #[arg(long, default_value_t = mftf_core::DEFAULT_ETA)]
        eta: f64,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        /// Schedule step to read maps at; defaults to the middle.
        #[arg(long)]
        step_index: Option<usize>,
    },
    /// Score (source, target, prompt) triples.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        /// `stub` or an http(s) scorer URL; falls back to `MFTF_SCORER`.
        #[arg(long)]
        scorer: Option<String>,
    },
    /// Render a trace as a contact sheet.
    Inspect {
        /// The `trace` directory written by `generate`.
        trace: PathBuf,
        #[arg(long, value_enum)]
        what: inspect::View,
        /// Layer ordinals to show as columns.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate {
            job,
            seeds,
            jobs,
            dump_tensors,
        } => generate::run(cli, job, seeds, *jobs, *dump_tensors),
        Command::Segment {
            image,
            prompt,
            tokens,
            eta,
            steps,
            step_index,
        } => segment::run(cli, image, prompt, tokens, *eta, *steps, *step_index),
        Command::Evaluate { pairs, scorer } => evaluate::run(cli, pairs, scorer.as_deref()),
        Command::Inspect { trace, what, layers } => inspect::run(cli, trace, *what, layers),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
