//! Command-line front end: generate synthetic multi-image question sets,
//! prepare them for training, run group-relative policy optimization with
//! permutation-augmented rollouts, and inspect the results.
//!
//! Every subcommand is deterministic given its seed flags, and datasets
//! travel with a `.meta.json` sidecar so later stages never have to restate
//! the vocabulary they were generated with.

mod cmd_eval_gap;
mod cmd_gen;
mod cmd_prep;
mod cmd_report;
mod cmd_train;
mod layering;
mod meta;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "permrl", version, about = "Permutation-augmented group-relative RL at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interleaved multi-image dataset
    Gen(cmd_gen::GenArgs),
    /// Filter, difficulty-score, and permutation-augment a dataset
    Prep(cmd_prep::PrepArgs),
    /// Train a policy and write metrics plus checkpoints
    Train(cmd_train::TrainArgs),
    /// Measure a checkpoint's order-sensitivity gap on held-out pairs
    EvalGap(cmd_eval_gap::EvalGapArgs),
    /// Turn a metrics stream into a plot-ready table
    Report(cmd_report::ReportArgs),
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen::run(args),
        Command::Prep(args) => cmd_prep::run(args),
        Command::Train(args) => cmd_train::run(args),
        Command::EvalGap(args) => cmd_eval_gap::run(args),
        Command::Report(args) => cmd_report::run(args),
    }
}
