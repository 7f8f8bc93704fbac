//! `mvdlab`: corpus synthesis, teacher pretraining, distillation,
//! evaluation and feature analysis from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mvdlab", version, about = "Masked video distillation on synthetic toy videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus
    Synth(SynthArgs),
    /// Pretrain an image or video teacher by masked pixel reconstruction
    Pretrain(PretrainArgs),
    /// Distill a student from frozen teachers (or run a baseline)
    Distill(DistillArgs),
    /// Classify toy tasks with each model and write an accuracy report
    Eval(EvalArgs),
    /// Cross-frame feature similarity of one model on a corpus
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Spatial,
    Temporal,
    Static,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    PerToken,
    Ema,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// number of classes (default 3 for spatial/static, 4 for temporal)
    #[arg(long)]
    pub classes: Option<usize>,
    /// clip shape TxHxWxC
    #[arg(long, default_value = "8x32x32x1")]
    pub geometry: String,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// sectioned key = value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// override one setting, e.g. --set stage1.epochs=5 (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long, value_enum)]
    pub modality: ModalityArg,
    /// corpus directories (comma separated), pooled without labels
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    /// checkpoint directory to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub image_teacher: Option<PathBuf>,
    #[arg(long)]
    pub video_teacher: Option<PathBuf>,
    #[arg(long)]
    pub lambda_img: Option<f64>,
    #[arg(long)]
    pub lambda_vid: Option<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// train a baseline instead of co-teaching
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// EMA momentum for --baseline ema
    #[arg(long)]
    pub momentum: Option<f64>,
    /// add a pixel-reconstruction decoder
    #[arg(long)]
    pub pixel_branch: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// checkpoint directories (comma separated)
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// tasks as NAME (read ROOT/NAME/train and ROOT/NAME/val) or
    /// NAME=TRAIN_DIR:VAL_DIR, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    #[arg(long, default_value = ".")]
    pub data_root: PathBuf,
    /// report CSV to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// similarity CSV to write
    #[arg(long)]
    pub out: PathBuf,
    /// repeat each temporal-token index once per frame it covers
    #[arg(long)]
    pub frame_axis: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Distill(a) => commands::distill(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
