//! `bonn`: train, evaluate, inspect and pack 1-bit CNNs.

mod commands;
mod fail;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bonn",
    version,
    about = "1-bit CNNs with Bayesian kernel and feature losses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoint, metrics.csv and manifest.json.
    Train(TrainArgs),
    /// Report test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Kernel-weight histogram and distribution summary of one binary layer.
    ExportHist(HistArgs),
    /// Write the bit-packed deployment model of a checkpoint.
    Pack(PackArgs),
    /// Memory compression ratio under both counting conventions.
    CompressRatio(RatioArgs),
    /// Time XNOR/popcount convolution against float convolution.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetKind,
    /// Directory holding the dataset files.
    #[arg(long, env = "BONN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Holdout size carved from the training files when no test files exist.
    #[arg(long, default_value_t = 1000)]
    pub holdout: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    Resnet,
    Wrn,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Main,
    Finetune,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value = "cnn-small")]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Stratified training subset size.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub theta: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub nu: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "main")]
    pub phase: PhaseArg,
    /// Drop the kernel loss during fine-tuning.
    #[arg(long)]
    pub no_kernel_loss_in_finetune: bool,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Learning rate of kernels, batch norm and classifier.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Learning rate of modulation vectors and σ.
    #[arg(long, default_value_t = 0.01)]
    pub lr_modulation: f64,
    /// Learning rate of μ.
    #[arg(long, default_value_t = 0.1)]
    pub lr_mu: f64,
    #[arg(long, value_enum, default_value = "resnet")]
    pub schedule: ScheduleKind,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Random crop and flip (CIFAR policy).
    #[arg(long)]
    pub augment: bool,
    /// Continue the run stored in this checkpoint.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Start from this checkpoint's parameters with a fresh optimizer.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Use the bit-packed XNOR/popcount network.
    #[arg(long)]
    pub packed: bool,
    #[arg(long, default_value_t = 500)]
    pub batch: usize,
    /// Directory for manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Binary layer index, 0 = first binary conv.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct RatioSource {
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RatioArgs {
    #[command(flatten)]
    pub source: RatioSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Compare packed and float convolution.
    #[arg(long, required = true)]
    pub packed_vs_float: bool,
    /// Comma-separated `CxHxW` shapes; each runs a 3×3, stride 1, C→C conv.
    #[arg(long, default_value = "64x32x32,128x16x16,256x8x8")]
    pub sizes: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { fail::EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportHist(a) => commands::export_hist(a),
        Command::Pack(a) => commands::pack(a),
        Command::CompressRatio(a) => commands::compress_ratio(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
