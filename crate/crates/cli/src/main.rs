//! Command-line front end: corruption previews, training, evaluation,
//! model comparison and gradient checks.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Restores digit images whose lower half was blanked and salted.
#[derive(Debug, Parser)]
#[command(name = "restorenet", version)]
pub struct Cli {
    /// Worker threads for convolution; 1 keeps runs bit-reproducible across machines.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export clean/corrupted preview pairs as PGM files.
    Corrupt(CorruptArgs),
    /// Train a model and write checkpoints, a loss log and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Evaluate two checkpoints on one corpus and export an image grid.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// IDX image file (raw or gzip). Defaults to the file found in $RESTORENET_DATA.
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CorruptionArgs {
    /// First blanked row.
    #[arg(long, default_value_t = 14)]
    pub blank_start: usize,
    /// Last blanked row (inclusive).
    #[arg(long, default_value_t = 27)]
    pub blank_end: usize,
    /// Salt-and-pepper density.
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
    /// Number of images to export.
    #[arg(short = 'n', long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model tag: cnn-lstm or cnn-cnn.
    pub model: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
    /// Stopping iteration [default: 2000; on resume, the checkpoint's value].
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Weight-decay coefficient.
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
    /// adam or adadelta.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gate that scales tanh(C) in the hidden state: output or input.
    #[arg(long, default_value = "output")]
    pub hidden_gate: String,
    /// Decoder layers.
    #[arg(long, default_value_t = 5)]
    pub layers: usize,
    /// Decoder hidden width.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    /// Iterations between checkpoints (0 = final only).
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Global gradient-norm cap.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_clip: bool,
    /// Train on only the first N images of the training split.
    #[arg(long)]
    pub train_images: Option<usize>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: std::path::PathBuf,
    /// Exact run directory, instead of a timestamped one under --out.
    #[arg(long)]
    pub run_dir: Option<std::path::PathBuf>,
    /// Record wall-clock milliseconds in the loss log.
    #[arg(long)]
    pub log_timing: bool,
    /// Continue from a checkpoint; --iterations raises the stopping point.
    #[arg(long, conflicts_with = "from_manifest")]
    pub resume: Option<std::path::PathBuf>,
    /// Replay the settings recorded in a run manifest.
    #[arg(long)]
    pub from_manifest: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HeldOutArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
    /// Corruption seed of the held-out inputs.
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Number of held-out images (from the start of the test split).
    #[arg(long, default_value_t = 500)]
    pub test_images: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: std::path::PathBuf,
    #[command(flatten)]
    pub held_out: HeldOutArgs,
    /// Write the report as CSV here.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Two checkpoints, or two report CSVs written by `eval --out`.
    #[arg(num_args = 2, required = true)]
    pub inputs: Vec<std::path::PathBuf>,
    #[command(flatten)]
    pub held_out: HeldOutArgs,
    /// Samples in the image grid.
    #[arg(long, default_value_t = 8)]
    pub grid_rows: usize,
    /// Output directory for the table, reports and grid.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or one scope name.
    #[arg(default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "output")]
    pub hidden_gate: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
