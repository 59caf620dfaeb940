//! `anchorml` command-line interface: dataset synthesis, training,
//! evaluation and k sweeps.
//!
//! Exit codes: 0 on success, 1 when a run aborts, 2 for usage and
//! configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anchorml::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Runtime(anchorml::Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "anchorml", version, about = "Anchor-aware audio-visual metric learning")]
struct Cli {
    /// Log progress (per-epoch losses) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Debug, Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set triplet_margin=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset with a train/test manifest.
    Synth(SynthArgs),
    /// Train projection networks and attention on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train one model per (strategy, k) and tabulate test MAP.
    #[command(name = "sweep-k")]
    SweepK(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    audio_dim: Option<String>,
    #[arg(long)]
    visual_dim: Option<String>,
    /// Distance between class centroids.
    #[arg(long)]
    separation: Option<String>,
    /// Standard deviation of the per-sample Gaussian noise.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    train_fraction: Option<String>,
    /// Feature storage precision: f32 or f64.
    #[arg(long)]
    dtype: Option<String>,
}

/// Training flags shared by `train` and `sweep-k`.
#[derive(Debug, Args)]
struct TrainingFlags {
    /// Dataset directory written by `synth` (or laid out the same way).
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Neighborhood size, counting the anchor itself.
    #[arg(long)]
    k: Option<String>,
    /// triplet, triplet_dagger, hard_triplet, contrastive, n_pair, angular, hinge or dsl.
    #[arg(long)]
    loss: Option<String>,
    /// joint or literal.
    #[arg(long)]
    aa_mode: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    heads: Option<String>,
}

impl TrainingFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
        vec![
            ("data", self.data.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("batch_size", self.batch_size.as_ref()),
            ("lr", self.lr.as_ref()),
            ("seed", self.seed.as_ref()),
            ("k", self.k.as_ref()),
            ("loss", self.loss.as_ref()),
            ("aa_mode", self.aa_mode.as_ref()),
            ("hidden", self.hidden.as_ref()),
            ("heads", self.heads.as_ref()),
        ]
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    training: TrainingFlags,
    /// Continue from a checkpoint written by a run with the same architecture.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    heads: Option<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    training: TrainingFlags,
    /// Sweep k = 1..=k_max.
    #[arg(long)]
    k_max: Option<String>,
    /// Comma-separated loss strategies.
    #[arg(long)]
    strategies: Option<String>,
    /// Number of runs trained concurrently.
    #[arg(long)]
    jobs: Option<String>,
}

fn resolve(
    mut schema: config::RunConfig,
    common: &Common,
    flags: &[(&str, Option<&String>)],
) -> Result<config::RunConfig, CliError> {
    if let Some(path) = &common.config {
        schema.merge_file(path)?;
    }
    schema.merge_flags(flags)?;
    schema.merge_assignments(&common.set)?;
    Ok(schema)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let flags = [
                ("classes", a.classes.as_ref()),
                ("per_class", a.per_class.as_ref()),
                ("audio_dim", a.audio_dim.as_ref()),
                ("visual_dim", a.visual_dim.as_ref()),
                ("separation", a.separation.as_ref()),
                ("noise", a.noise.as_ref()),
                ("seed", a.seed.as_ref()),
                ("train_fraction", a.train_fraction.as_ref()),
                ("dtype", a.dtype.as_ref()),
            ];
            let cfg = resolve(config::synth_schema(), &a.common, &flags)?;
            commands::synth(&cfg, &a.common.out)
        }
        Command::Train(a) => {
            let mut flags = a.training.pairs();
            flags.push(("resume", a.resume.as_ref()));
            let cfg = resolve(config::train_schema(), &a.common, &flags)?;
            commands::train(&cfg, &a.common.out)
        }
        Command::Eval(a) => {
            let flags = [
                ("data", a.data.as_ref()),
                ("checkpoint", a.checkpoint.as_ref()),
                ("hidden", a.hidden.as_ref()),
                ("heads", a.heads.as_ref()),
            ];
            let cfg = resolve(config::eval_schema(), &a.common, &flags)?;
            commands::eval(&cfg, &a.common.out)
        }
        Command::SweepK(a) => {
            let mut flags = a.training.pairs();
            flags.push(("k_max", a.k_max.as_ref()));
            flags.push(("strategies", a.strategies.as_ref()));
            flags.push(("jobs", a.jobs.as_ref()));
            let cfg = resolve(config::sweep_schema(), &a.common, &flags)?;
            commands::sweep_k(&cfg, &a.common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
