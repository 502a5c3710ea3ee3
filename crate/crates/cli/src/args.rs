use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Multi-stem token music generation and stem editing.
///
/// Outputs go to `--out`; relative paths resolve against
/// `$STEMGEN_OUTPUT_ROOT` when set. `$STEMGEN_LOG` sets the log level.
#[derive(Debug, Parser)]
#[command(name = "stemgen", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic symbolic dataset (token files, sidecars, manifest).
    SynthData(SynthDataArgs),
    /// Fit a residual-VQ codebook set on one stem's feature frames.
    TrainCodec(TrainCodecArgs),
    /// Train the language model.
    #[command(alias = "train")]
    TrainLm(TrainLmArgs),
    /// Sample a new song.
    Generate(GenerateArgs),
    /// Regenerate masked stems of a token file.
    Edit(EditArgs),
    /// Score generation and editing tasks on a dataset split.
    Evaluate(EvaluateArgs),
    /// Pretty-print a token file, checkpoint, codebook file or dataset.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TrainCodec(_) => "train-codec",
            Command::TrainLm(_) => "train-lm",
            Command::Generate(_) => "generate",
            Command::Edit(_) => "edit",
            Command::Evaluate(_) => "evaluate",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthDataArgs {
    /// Number of songs.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per song.
    #[arg(long, default_value_t = 48)]
    pub frames: usize,
    /// Probability that a bass note is a chord tone.
    #[arg(long, default_value_t = 1.0)]
    pub p_ct: f64,
    /// Probability that a drum hit lands on the beat.
    #[arg(long, default_value_t = 1.0)]
    pub p_ob: f64,
    /// Probability of a bass rest on a beat.
    #[arg(long, default_value_t = 0.1)]
    pub p_rest: f64,
    /// Add off-beat hi-hats.
    #[arg(long)]
    pub hats: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCodecArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Stem whose rendered features are quantized.
    #[arg(long)]
    pub stem: String,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long, default_value_t = 16)]
    pub codebook_size: usize,
    /// k-means iterations per stage.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML config (sections: model, data, optimization, editing, logging).
    #[arg(long, conflicts_with = "toy")]
    pub config: Option<PathBuf>,
    /// Use the small single-core preset instead of the full defaults.
    #[arg(long)]
    pub toy: bool,
    /// Override `optimization.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override `optimization.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `model.precision`.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 250)]
    pub top_k: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 3.0)]
    pub cfg_scale: f64,
    /// Disable classifier-free guidance.
    #[arg(long)]
    pub no_cfg: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Condition id; unconditional when absent.
    #[arg(long)]
    pub cond: Option<usize>,
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source token file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Stem or stage suffix to regenerate: `drums`, `other:3-4`, `other:2+`.
    #[arg(long, required = true)]
    pub mask: Vec<String>,
    /// `forced` keeps unmasked streams; `free` resamples everything.
    #[arg(long, default_value = "forced", value_parser = ["forced", "free"])]
    pub mode: String,
    #[arg(long)]
    pub cond: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub downsample_factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// t2m, edit:bass, edit:drums or edit:other; repeatable (all when absent).
    #[arg(long)]
    pub task: Vec<String>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Limit the number of songs.
    #[arg(long)]
    pub n_songs: Option<usize>,
    /// Frames per example (longest the model accepts when absent).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value = "forced", value_parser = ["forced", "free"])]
    pub mode: String,
    #[arg(long, default_value_t = 0.07)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 5)]
    pub downsample_factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// Token file, checkpoint, codebook file or dataset directory.
    pub path: PathBuf,
    /// Frames of a token file to print.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}
