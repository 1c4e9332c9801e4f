//! Command-line surface.
//!
//! Flags mirror the run-configuration TOML: anything given on the command
//! line overrides the file, and the merged result is what a run records in
//! its output directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxkd::data::Split;
use voxkd::Dtype;

#[derive(Debug, Parser)]
#[command(
    name = "voxkd",
    version,
    about = "Sparse voxel segmentation: synthetic data, training, distillation, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset with a train/val split.
    GenData(GenDataArgs),
    /// Train a network with plain cross-entropy supervision.
    TrainTeacher(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a dataset split and print per-class IoU.
    Eval(EvalArgs),
    /// Describe a checkpoint or architecture: parameters, shapes, occupancy.
    Inspect(InspectArgs),
    /// Verify analytic gradients against finite differences, layer by layer.
    Gradcheck(GradcheckArgs),
    /// Render run histories into loss/mIoU curves and a per-class table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(value: DtypeArg) -> Dtype {
        match value {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(value: SplitArg) -> Split {
        match value {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Base seed; scene i derives its own generator from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total scene count, split 80/20 into train/val (at least one each).
    #[arg(long)]
    pub scenes: usize,
    /// Semantic classes per scene (floor, walls, then objects).
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Room edge length in meters.
    #[arg(long, default_value_t = 6.0)]
    pub room_size: f64,
    /// Points sampled per class per scene.
    #[arg(long, default_value_t = 600)]
    pub points_per_class: usize,
    /// Positional noise sigma in meters.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Also materialize each scene as a binary PLY file.
    #[arg(long)]
    pub ply: bool,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Config-file keys that may be overridden from the command line.
#[derive(Debug, Args)]
pub struct ConfigOverrides {
    /// Override [train] epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override [train] seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override [train] save_every (0 = final checkpoint only).
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Override [optim] lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override [data] voxel_size (meters).
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Override [model] arch.
    #[arg(long)]
    pub arch: Option<String>,
    /// Override [model] divisor.
    #[arg(long)]
    pub divisor: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: effective config, history, checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of initializing fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Floating-point width for weights and arithmetic.
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Teacher checkpoint (frozen; never receives gradients).
    #[arg(long)]
    pub teacher: PathBuf,
    /// Override [distill] alpha (1 = pure cross-entropy).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Override [distill] temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Override [distill] lambda_dec (decoder feature-map weight).
    #[arg(long)]
    pub lambda_dec: Option<f64>,
    /// Override [distill] lambda_enc (encoder feature-map weight).
    #[arg(long)]
    pub lambda_enc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Voxel size the checkpoint was trained at (meters).
    #[arg(long, default_value_t = 0.05)]
    pub voxel_size: f64,
    /// Dataset split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(required_unless_present_any = ["arch", "data"])]
    pub ckpt: Option<PathBuf>,
    /// Architecture to describe instead of a checkpoint,
    /// e.g. Res16UNet34C or Res16UNet34C_Half.
    #[arg(long, conflicts_with = "ckpt")]
    pub arch: Option<String>,
    /// Width divisor for --arch.
    #[arg(long, default_value_t = 1, conflicts_with = "ckpt")]
    pub divisor: usize,
    /// Class count for --arch.
    #[arg(long, default_value_t = 20, conflicts_with = "ckpt")]
    pub classes: usize,
    /// Dataset directory to compute voxel occupancy statistics for.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Voxel sizes for the occupancy table, in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.05, 0.025])]
    pub voxel_sizes: Vec<f64>,
    /// List every parameter tensor instead of per-stage subtotals.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Architecture name; accepts divisor-carrying variants like
    /// Res16UNet34C@divisor=8.
    #[arg(long, default_value = "Res16UNet34C")]
    pub arch: String,
    /// Width divisor (combined with a family name).
    #[arg(long, default_value_t = 8)]
    pub divisor: usize,
    /// Class count for the probe network.
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Number of active input sites.
    #[arg(long, default_value_t = 20)]
    pub sites: usize,
    /// Probed entries per parameter tensor.
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum allowed relative error between analytic and
    /// finite-difference gradients.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A run directory, or a directory whose subdirectories are runs.
    pub dir: PathBuf,
    /// Output directory (default: <DIR>/report).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
