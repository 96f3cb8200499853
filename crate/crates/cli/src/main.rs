//! `dmnil`: generate synthetic corpora, train, evaluate and dump diagnostics.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dmnil", version, about = "Self-supervised cross-view retrieval training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-view corpus as feature files.
    Generate(GenerateArgs),
    /// Train an encoder and write manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Export cluster-count traces and similarity histograms of a run.
    Diag(DiagArgs),
}

/// Synthetic corpus shape. Unset options keep the built-in defaults.
#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// Number of locations.
    #[arg(long)]
    pub locations: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub drone_per_loc: Option<usize>,
    #[arg(long)]
    pub sat_per_loc: Option<usize>,
    /// Standard deviation of the additive input noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Use one view map for both views.
    #[arg(long)]
    pub shared_view_map: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file with optional `[train]` and `[data]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drone feature file (requires --satellite).
    #[arg(long)]
    pub drone: Option<PathBuf>,
    /// Satellite feature file (requires --drone).
    #[arg(long)]
    pub satellite: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// DBSCAN radius in cosine distance.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    /// baseline, dhml, icel or full.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Override any training key, e.g. `--set coefficients.icel=0.5`.
    #[arg(long, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed of the synthetic corpus.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Run every kernel on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory; supplies checkpoint and corpus unless overridden.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub drone: Option<PathBuf>,
    #[arg(long)]
    pub satellite: Option<PathBuf>,
    /// Where to write the JSON report (defaults to `<run>/eval.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagArgs {
    /// Completed run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory (defaults to the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram bins over [-1, 1].
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => commands::cmd_generate(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Diag(a) => commands::cmd_diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
