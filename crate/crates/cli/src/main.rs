//! `regibox`: synthetic data, Stage 1 box training, Stage 2 augmentation and
//! probing, evaluation and region analytics from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regibox::boxnet::Activation;
use regibox::eval::{Method, Protocol};
use regibox::synth::MeanLayout;

use crate::config::{ConfigValue, List};
use crate::error::{usage, CliResult};

#[derive(Parser)]
#[command(name = "regibox", version, about = "Regional latent augmentation for linear probes")]
struct Cli {
    /// Flat key=value file; flags override its values, which override defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic bundle (train/val/test_in/test_out + class text).
    Synth(SynthArgs),
    /// Train the box network and write its checkpoint and trace.
    Stage1(Stage1Args),
    /// Augment the training set from the boxes and fit a linear probe.
    Stage2(Stage2Args),
    /// Score a method under a protocol over several seeds.
    Eval(EvalArgs),
    /// Rank classes by box volume and per-dimension side length.
    Analyze(AnalyzeArgs),
}

fn cv<T: ConfigValue>(s: &str) -> Result<T, String> {
    T::parse_value(s)
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Spread of every class around its mean.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Per-class spreads, comma separated; overrides --sigma.
    #[arg(long, value_parser = cv::<List<f64>>)]
    pub class_sigmas: Option<List<f64>>,
    /// Rows per class in val and in each test split.
    #[arg(long)]
    pub eval_per_class: Option<usize>,
    /// Magnitude of the out-of-domain shift.
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long, value_parser = cv::<MeanLayout>)]
    pub layout: Option<MeanLayout>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BoxNetArgs {
    /// Weight of the class consistency terms, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_batch_size: Option<usize>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage1_weight_decay: Option<f64>,
    /// Hidden widths, comma separated (default: one layer as wide as the input).
    #[arg(long, value_parser = cv::<List<usize>>)]
    pub hidden: Option<List<usize>>,
    #[arg(long, value_parser = cv::<Activation>)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Use the midpoint without renormalizing it.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub raw_midpoint: Option<bool>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub probe_batch_size: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub probe_weight_decay: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub bias: Option<bool>,
    /// Keep the epoch with the best validation accuracy.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub select_on_val: Option<bool>,
}

#[derive(Args)]
pub struct Stage1Args {
    /// Bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub boxnet: BoxNetArgs,
}

#[derive(Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage 1 checkpoint; not needed with --samples 0.
    #[arg(long)]
    pub boxnet: Option<PathBuf>,
    /// Box samples per training image.
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub probe: ProbeArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = cv::<Method>)]
    pub method: Option<Method>,
    /// standard, few-shot:N or imbalanced:X:N
    #[arg(long, value_parser = cv::<Protocol>)]
    pub protocol: Option<Protocol>,
    #[arg(long, value_parser = cv::<List<u64>>)]
    pub seeds: Option<List<u64>>,
    /// Score this probe checkpoint instead of training one per seed.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub boxnet: BoxNetArgs,
    #[command(flatten)]
    pub probe_args: ProbeArgs,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub boxnet: Option<PathBuf>,
    /// train, val, test_in or test_out
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Dimensions for the side-length ranking (default: all).
    #[arg(long, value_parser = cv::<List<usize>>)]
    pub dims: Option<List<usize>>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("REGIBOX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("REGIBOX_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot set up {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => commands::synth(a, config),
        Command::Stage1(a) => commands::stage1(a, config),
        Command::Stage2(a) => commands::stage2(a, config),
        Command::Eval(a) => commands::eval(a, config),
        Command::Analyze(a) => commands::analyze(a, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
