//! `gsecnet`: pillar-based LiDAR ground segmentation from the command line.
//!
//! One binary covers the whole pipeline: `preprocess` scans into pillar
//! tensors, `synth` labelled scenes, `train` a checkpoint, `infer` per-point
//! labels, `eval` predictions, `bench` the stages, and `complexity` the
//! model's parameter/MAC budget. Configuration comes from a TOML file plus
//! `--set` overrides; every artifact embeds the configuration hash and
//! mismatches are refused unless `--force` is given.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 config-hash
//! conflict.

mod commands;
mod config;
mod pipeline;
mod util;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit 2.
    Usage(String),
    /// Unreadable or inconsistent input data; exit 3.
    Data(String),
    /// Artifact config hashes disagree; exit 4.
    Conflict(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Conflict(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Conflict(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Shorthand for wrapping pipeline errors as usage errors.
pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Shorthand for wrapping pipeline errors as data errors.
pub fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "gsecnet",
    version,
    about = "Pillar-based LiDAR ground segmentation pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML); omitted fields keep shipped defaults.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set train.epochs=5 (repeatable;
    /// flags win over the file).
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for frame-level parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Proceed despite config-hash mismatches between artifacts.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert scans (and labels, if given) into pillar tensor artifacts.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Generate labelled synthetic scan/label pairs.
    Synth(commands::synth::SynthArgs),
    /// Train on preprocessed or synthetic frames; writes checkpoint + log.
    Train(commands::train::TrainArgs),
    /// Label one scan with a trained checkpoint.
    Infer(commands::infer::InferArgs),
    /// Score predictions against ground truth.
    Eval(commands::eval::EvalArgs),
    /// Time the pipeline stages on synthetic frames.
    Bench(commands::bench::BenchArgs),
    /// Print the per-layer parameter and MAC table.
    Complexity(commands::complexity::ComplexityArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(usage)?;
    }
    let config = RunConfig::load(cli.common.config.as_deref(), &cli.common.set)?;
    let force = cli.common.force;
    match cli.command {
        Command::Preprocess(args) => commands::preprocess::run(&config, &args),
        Command::Synth(args) => commands::synth::run(&config, &args),
        Command::Train(args) => commands::train::run(&config, &args, force),
        Command::Infer(args) => commands::infer::run(&config, &args, force),
        Command::Eval(args) => commands::eval::run(&config, &args, force),
        Command::Bench(args) => commands::bench::run(&config, &args),
        Command::Complexity(args) => commands::complexity::run(&config, &args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help/--version
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
