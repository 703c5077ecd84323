//! `specssl`: data generation, pretraining, downstream evaluation, sweeps and
//! attention export.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or data errors, 3
//! when training itself fails. Diagnostics go to stderr; stdout carries
//! progress (one line per epoch) and results.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "specssl", version, about = "Self-supervised pretraining for spectral imagery")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Output directory (the dataset directory for gen-data).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// key=value file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads. Kernels are single-threaded, so values above 1 are
    /// recorded but do not change the computation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: cubes, manifest and ground-truth sidecars.
    GenData(GenDataArgs),
    /// Pretrain an encoder with object-level (obj) or pixel-level (pix) SSL.
    Pretrain(PretrainArgs),
    /// Train a linear head on a frozen encoder.
    Probe(ProbeArgs),
    /// Train a head and the encoder together.
    Finetune(FinetuneArgs),
    /// Pretrain once per masking ratio and probe each encoder.
    SweepMask(SweepArgs),
    /// Export the summary token's attention over the patch grid.
    ExportAttn(ExportArgs),
    /// Score a predictions CSV against a labels CSV.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub cubes: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub endmembers: Option<usize>,
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub label_threshold: Option<f64>,
    /// Gaussian blobs per endmember abundance map.
    #[arg(long)]
    pub blobs: Option<usize>,
    /// Tiles per row of the virtual scene; 2x2 tile blocks form a geo group.
    #[arg(long)]
    pub scene_cols: Option<usize>,
    /// Share of geo groups assigned to the validation split.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Obj,
    Pix,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small model and schedule that train on one core in minutes.
    Desk,
    /// The full-size architecture and schedule.
    Full,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Teacher temperature (obj).
    #[arg(long)]
    pub tau_t: Option<f32>,
    /// Student temperature (obj).
    #[arg(long)]
    pub tau_s: Option<f32>,
    /// Share of band groups masked (pix).
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Profile stride (pix).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Save the training state every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from the saved training state in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTask {
    Multilabel,
    Regression,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<HeadTask>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub head_lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Profile stride used to featurize cubes with a spectral encoder.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Share of the training labels used, drawn as a stratified subset.
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Last,
    All,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Constant encoder learning rate.
    #[arg(long)]
    pub encoder_lr: Option<f64>,
    /// Encoder blocks that are updated.
    #[arg(long, value_enum)]
    pub depth: Option<Depth>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Downstream task used to score each ratio.
    #[arg(long, value_enum)]
    pub task: Option<HeadTask>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub head_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Spatial encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SCUB cube file.
    #[arg(long)]
    pub cube: PathBuf,
    /// Block index; defaults to the last block.
    #[arg(long)]
    pub block: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// CSV of `id,p_0..p_{K-1}`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV of `id,label_0..label_{K-1}`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.global, a),
        Command::Pretrain(a) => commands::pretrain(&cli.global, a),
        Command::Probe(a) => commands::probe(&cli.global, a, None),
        Command::Finetune(a) => commands::probe(&cli.global, a.probe, Some((a.encoder_lr, a.depth))),
        Command::SweepMask(a) => commands::sweep_mask(&cli.global, a),
        Command::ExportAttn(a) => commands::export_attn(&cli.global, a),
        Command::Score(a) => commands::score(&cli.global, a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
