//! Command-line driver: benchmark generation, training, evaluation,
//! ablations, gradient checks and vocabulary alignment.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fusex", version, about = "Adaptive multi-source distribution fusion")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark (domains, corpora, source matrices).
    Generate,
    /// Train the target model against a generated benchmark.
    Train(TrainArgs),
    /// Compare a fused and a baseline checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Sweep one or all ablation axes.
    Ablate(AblateArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Map a source vocabulary onto a target vocabulary by edit distance.
    Align(AlignArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from a checkpoint written by the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the fuse-all baseline instead of the adaptive objective.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// One axis, or `all`.
    #[arg(long, default_value = "all")]
    pub axis: String,
    /// Overrides the configured step count for every run.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub sources: usize,
    #[arg(long, default_value_t = 4)]
    pub positions: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// One token per line.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// CSV output; defaults to `<out>/alignment.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Resolves the config and runs the command, returning what it printed.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Ablate(a) => commands::ablate(&cfg, &a),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, &a),
        Command::Align(a) => commands::align(&cfg, &a),
    }
}
