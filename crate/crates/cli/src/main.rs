//! `avdf`: synthetic corpus generation, two-stage training, evaluation and
//! analysis for audio-visual deepfake detection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use avdf_core::error::ErrorClass;
use avdf_core::model::McaMode;
use avdf_core::AvdfError;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(name = "avdf", version, about)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Starting point for every configuration value.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,

    /// Master seed (falls back to AVDF_SEED, then the config file).
    #[arg(long, global = true, env = "AVDF_SEED")]
    pub seed: Option<u64>,

    /// Run batch work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesise a labelled corpus and write it with its manifest.
    GenCorpus(GenCorpusArgs),
    /// Stage 1: train the recognition backbone with CTC on real clips.
    Pretrain(PretrainArgs),
    /// Stage 2: train the dual-label detector.
    Finetune(FinetuneArgs),
    /// Score a split under the presence scenarios.
    Eval(EvalArgs),
    /// Score a single sample file.
    Predict(PredictArgs),
    /// Compare pretraining on/off across MCA modes and seeds.
    Ablate(AblateArgs),
    /// Write the classifier embedding of every sample in a split as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Samples in each of the four label classes.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub phonemes: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub correlation: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Corpus directory (containing manifest.json).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Continue from this checkpoint's step counter and optimiser state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON-lines training log (defaults to the checkpoint path with a
    /// `.jsonl` extension).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// `fresh`, or a pretraining checkpoint whose backbone seeds the model.
    #[arg(long, default_value = "fresh")]
    pub init: String,
    #[arg(long)]
    pub mca: Option<McaMode>,
    /// Per-modality dropout probability.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub freeze_backbone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    All,
    Av,
    Audio,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ScenarioArg::All)]
    pub scenario: ScenarioArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sample scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresenceArg {
    Av,
    Audio,
    Video,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A sample file from a corpus directory.
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, value_enum, default_value_t = PresenceArg::Av)]
    pub presence: PresenceArg,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated MCA modes.
    #[arg(long, value_delimiter = ',')]
    pub mca: Option<Vec<McaMode>>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<AvdfError>().map(AvdfError::class) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Numeric) => 4,
        _ => 3,
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
