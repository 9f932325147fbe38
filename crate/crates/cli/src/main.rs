mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "addq",
    version,
    about = "Additive quantization of linear-layer weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Config file: a JSON object or `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Knobs shared by `quantize` and `sweep`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop when the relative loss improvement of an epoch drops below this.
    #[arg(long)]
    pub early_stop: Option<f64>,
    /// Assignment metric: hessian or euclidean.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub update_steps: Option<usize>,
    #[arg(long)]
    pub update_lr: Option<f64>,
    /// Hessian damping factor.
    #[arg(long)]
    pub damp: Option<f64>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    #[arg(long)]
    pub kmeans_tol: Option<f64>,
    #[arg(long)]
    pub oaem_rounds: Option<usize>,
    #[arg(long)]
    pub oaem_steps: Option<usize>,
    #[arg(long)]
    pub oaem_lr: Option<f64>,
    /// Cosine schedule span: per_round or all_rounds.
    #[arg(long)]
    pub oaem_schedule: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize one layer and write an AQV1 artifact.
    Quantize(commands::QuantizeArgs),
    /// Layer loss of an artifact, optionally under shifted activations.
    Eval(commands::EvalArgs),
    /// Compare beam search against exhaustive search on every group.
    Oracle(commands::OracleArgs),
    /// Split the greedy-vs-optimal gap of every group into its three terms.
    Decompose(commands::DecomposeArgs),
    /// Run a representational-ratio sweep from a config file.
    Sweep(commands::SweepArgs),
    /// Generate synthetic weights or activations.
    Synth(commands::SynthArgs),
    /// Fine-tune codebooks and codes of an artifact on held-out activations.
    Pvtune(commands::PvtuneArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<addq_core::Error>() {
            return if e.is_divergence() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Quantize(a) => commands::quantize(a),
        Command::Eval(a) => commands::eval(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Synth(a) => commands::synth(a),
        Command::Pvtune(a) => commands::pvtune(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
