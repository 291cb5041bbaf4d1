//! Command-line front end and HTTP annotation service.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod serve;

/// Runtime failures exit 1, usage mistakes exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "affectlab", version, about = "Valence-arousal annotation, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pairwise agreement between annotators' traces of one video and dimension.
    Agreement(AgreementArgs),
    /// Resample traces to frames and average them into one series file.
    Merge(MergeArgs),
    /// Build a manifest from frame folders and merged series files.
    BuildManifest(BuildManifestArgs),
    /// Split a manifest into train and test videos.
    Split(SplitArgs),
    /// Pixel statistics over a manifest's frames.
    Stats(StatsArgs),
    /// Train a model; per-epoch reports stream to stdout.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict valence and arousal for a single image.
    Predict(PredictArgs),
    /// Write a synthetic learnable dataset.
    Synth(SynthArgs),
    /// Serve the video catalog and annotation store over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    /// Trace files, at least two.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = affectlab::annotation::DEFAULT_FPS)]
    pub fps: f64,
    /// Frames to resample to; defaults to cover the longest trace.
    #[arg(long)]
    pub frames: Option<usize>,
    /// ccc or pearson.
    #[arg(long, default_value = "ccc")]
    pub metric: String,
    /// Print CSV instead of the aligned table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = affectlab::annotation::DEFAULT_FPS)]
    pub fps: f64,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildManifestArgs {
    #[arg(long, env = "AFFECTLAB_DATA")]
    pub frames_root: PathBuf,
    /// Directory of `<video>_valence.csv` and `<video>_arousal.csv` series files.
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "2:1")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, env = "AFFECTLAB_DATA")]
    pub frames_root: PathBuf,
    #[arg(long)]
    pub channelwise: bool,
    /// Stats file to write; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags shared by train and eval; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "AFFECTLAB_DATA")]
    pub frames_root: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub preproc: Option<String>,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long)]
    pub target_ccc: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// joint or per_sequence.
    #[arg(long)]
    pub loss: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long = "ckpt")]
    pub resume: Option<PathBuf>,
    /// Any config key as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Name shown in the dataset column.
    #[arg(long, default_value = "test")]
    pub dataset: String,
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
    /// Add MSE columns to the table.
    #[arg(long)]
    pub mse: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub seq_len: usize,
    #[arg(long, default_value_t = affectlab::eval::DEFAULT_TAIL_FRACTION)]
    pub tail: f64,
    /// Landmarks file holding a line for the image, if the chain aligns faces.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub videos: usize,
    #[arg(long, default_value_t = 160)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// CSV `id,path,fps,frame_count`; relative paths resolve against its directory.
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Static UI bundle served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Agreement(a) => commands::agreement(&a),
        Command::Merge(a) => commands::merge(&a),
        Command::BuildManifest(a) => commands::build_manifest(&a),
        Command::Split(a) => commands::split(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Serve(a) => serve::run(&a),
    }
}
