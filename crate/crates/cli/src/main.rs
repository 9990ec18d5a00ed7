//! `fewgen`: pre-train, fine-tune, sample, evaluate, benchmark and profile.

mod commands;
mod plots;
mod profile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fewgen", version, about = "Few-shot diffusion time-series generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on every dataset of the pre-training corpus.
    Pretrain(CommonArgs),
    /// Adapt a pre-trained checkpoint to the target dataset.
    Finetune(CommonArgs),
    /// Draw series for the target dataset from a checkpoint.
    Sample(CommonArgs),
    /// Score a checkpoint's samples against the target test split.
    Evaluate(CommonArgs),
    /// Run every configured model on every dataset and subset.
    Benchmark(CommonArgs),
    /// Report adapter FLOPs for a list of maximum channel counts.
    Profile(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; also replaces the pre-training and fine-tuning seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "FEWGEN_OUTPUT_DIR", default_value = "fewgen-output")]
    pub output_dir: PathBuf,
    /// Dotted config override, e.g. `pretrain.epochs=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Input checkpoint (replaces the config's `checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample from the EMA weights (default).
    #[arg(long, overrides_with = "no_ema")]
    pub ema: bool,
    /// Sample from the raw trained weights.
    #[arg(long, overrides_with = "ema")]
    pub no_ema: bool,
    /// `pct:0.05`, `count:25` or `full`.
    #[arg(long)]
    pub subset: Option<String>,
    /// Generated series length.
    #[arg(long)]
    pub length: Option<usize>,
    /// Comma-separated maximum channel counts for `profile`.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Sample(a) => commands::sample(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Profile(a) => commands::profile(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::error_report(&e));
            ExitCode::from(1)
        }
    }
}
