//! One binary for the whole pipeline: synthetic corpus generation,
//! unsupervised pretraining of the block, supervised fine-tuning, held-out
//! evaluation, gradient verification, and the block-initialization ablation.

mod commands;
mod overlay;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mfm_core::mfm::HeadKind;
use mfm_core::vigat::BlockMode;
use mfm_core::Error;

fn main() {
    std::process::exit(run(std::env::args_os()));
}

/// Exit codes: 0 success, 1 usage or configuration error, 2 malformed or
/// missing data, 3 numeric failure.
fn run<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    if err.is_data_error() {
        2
    } else if matches!(err, Error::NonFinite { .. }) {
        3
    } else {
        1
    }
}

#[derive(Parser)]
#[command(name = "mfm", version, about = "Masked feature modelling toolkit")]
pub struct Cli {
    /// Worker threads for batch parallelism (1 = sequential reference path,
    /// 0 = library default pool).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Key=value file supplying defaults; explicit flags take precedence.
    /// A run manifest from an earlier run is valid input.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Echo the effective configuration to standard error.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (plus codebook for the pretrain flavor).
    SynthGen(SynthGenArgs),
    /// Pretrain the block on masked-feature reconstruction.
    Pretrain(PretrainArgs),
    /// Fine-tune the recognition head on a labeled corpus.
    Finetune(FinetuneArgs),
    /// Top-1 accuracy of a saved model on a labeled corpus.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients of the full pretraining objective.
    Gradcheck(GradcheckArgs),
    /// Fine-tune and evaluate all six block-initialization variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthGenArgs {
    /// Corpus flavor: `pretrain` (patch embeddings, no labels) or `labeled`.
    pub flavor: Flavor,
    /// Output directory for the videos and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Objects per frame.
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Patches per object (pretrain flavor).
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub patch_dim: Option<usize>,
    /// Codebook length (pretrain flavor).
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Where to write the codebook (pretrain flavor).
    #[arg(long)]
    pub codebook_out: Option<PathBuf>,
    /// Class count (labeled flavor).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed of the shared latent structure; corpora generated with the same
    /// value live in the same feature space.
    #[arg(long)]
    pub struct_seed: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Directory holding a corpus manifest and video files.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Fraction of each frame's objects to mask.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Vocabulary entries kept in the binary target.
    #[arg(long)]
    pub top_r: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs at which the learning rate is scaled by the decay factor,
    /// e.g. `50,100`; `none` disables.
    #[arg(long)]
    pub milestones: Option<Milestones>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Scoring head: `sigmoid` (per-token binary targets) or `softmax`.
    #[arg(long)]
    pub head: Option<HeadArg>,
    /// Attention projection width; defaults to the feature dimension.
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the checkpoint every this many epochs (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Pretrained checkpoint, or `none` to train from scratch only.
    #[arg(long)]
    pub ckpt: Option<String>,
    /// ω_2 initialization: random | pretrained | mean-pool.
    #[arg(long)]
    pub init_w2: Option<InitMode>,
    /// ω_3 initialization: random | pretrained | mean-pool.
    #[arg(long)]
    pub init_w3: Option<InitMode>,
    /// Back ω_2 and ω_3 with a single parameter set.
    #[arg(long, value_name = "BOOL")]
    pub share_23: Option<bool>,
    /// Add the frame-feature branch (ω_1).
    #[arg(long, value_name = "BOOL")]
    pub global: Option<bool>,
    /// Expected frames per video; corpora with a different count are
    /// rejected.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Class count; defaults to one past the largest training label.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Classifier hidden width; defaults to the feature dimension.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// See `pretrain --milestones`.
    #[arg(long)]
    pub milestones: Option<Milestones>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model path to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained checkpoint backing the `pretrained` rows.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// See `pretrain --milestones`.
    #[arg(long)]
    pub milestones: Option<Milestones>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for per-variant metrics and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Pretrain,
    Labeled,
}

impl FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain" => Ok(Flavor::Pretrain),
            "labeled" => Ok(Flavor::Labeled),
            other => Err(format!("expected `pretrain` or `labeled`, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitMode(pub BlockMode);

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(InitMode(BlockMode::GatRandom)),
            "pretrained" => Ok(InitMode(BlockMode::GatPretrained)),
            "mean-pool" => Ok(InitMode(BlockMode::MeanPool)),
            other => Err(format!(
                "expected `random`, `pretrained`, or `mean-pool`, got {other:?}"
            )),
        }
    }
}

pub fn mode_name(mode: BlockMode) -> &'static str {
    match mode {
        BlockMode::GatRandom => "random",
        BlockMode::GatPretrained => "pretrained",
        BlockMode::MeanPool => "mean-pool",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadArg(pub HeadKind);

impl FromStr for HeadArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sigmoid" => Ok(HeadArg(HeadKind::Sigmoid)),
            "softmax" => Ok(HeadArg(HeadKind::Softmax)),
            other => Err(format!("expected `sigmoid` or `softmax`, got {other:?}")),
        }
    }
}

impl fmt::Display for HeadArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            HeadKind::Sigmoid => "sigmoid",
            HeadKind::Softmax => "softmax",
        })
    }
}

/// Learning-rate decay epochs: comma-separated list or `none`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Milestones(pub Vec<usize>);

impl FromStr for Milestones {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Milestones(Vec::new()));
        }
        s.split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|_| format!("bad milestone {part:?} in {s:?}"))
            })
            .collect::<Result<Vec<usize>, String>>()
            .map(Milestones)
    }
}

impl fmt::Display for Milestones {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}
