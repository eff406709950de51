//! The `taloc` command line: dataset synthesis, training, evaluation,
//! gradient checking and attention benchmarks.
//!
//! Exit codes are a stable contract: 0 success, 1 check failure,
//! 2 usage or validation error, 3 numeric failure.

pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taloc_core::taa::{FusionMode, ScoreScale, ShiftMode};

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Bad input from the user; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification command ran to completion and found a failure; exit code 1.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Debug, Parser)]
#[command(name = "taloc", version, about = "Temporal action localization toolkit", args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON settings, or a manifest from an earlier run to replay it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-video work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Count and time windowed versus dense attention.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub min_segments: Option<usize>,
    #[arg(long)]
    pub max_segments: Option<usize>,
    #[arg(long)]
    pub min_segment_steps: Option<usize>,
    #[arg(long)]
    pub max_segment_steps: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub signature: Option<SignatureArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignatureArg {
    Basis,
    Rotated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Fixed11,
    AlphaRight,
    AlphaLeft,
    AlphaComplement,
    TwoAlphas,
}

impl From<FusionArg> for FusionMode {
    fn from(a: FusionArg) -> Self {
        match a {
            FusionArg::Fixed11 => FusionMode::Fixed11,
            FusionArg::AlphaRight => FusionMode::AlphaRight,
            FusionArg::AlphaLeft => FusionMode::AlphaLeft,
            FusionArg::AlphaComplement => FusionMode::AlphaComplement,
            FusionArg::TwoAlphas => FusionMode::TwoAlphas,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShiftArg {
    /// Bidirectional shift.
    Bs,
    /// General (one-sided) shift.
    Gs,
}

impl From<ShiftArg> for ShiftMode {
    fn from(a: ShiftArg) -> Self {
        match a {
            ShiftArg::Bs => ShiftMode::Bidirectional,
            ShiftArg::Gs => ShiftMode::General,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    SqrtT,
    SqrtDh,
}

impl From<ScaleArg> for ScoreScale {
    fn from(a: ScaleArg) -> Self {
        match a {
            ScaleArg::SqrtT => ScoreScale::SqrtT,
            ScaleArg::SqrtDh => ScoreScale::SqrtDh,
        }
    }
}

/// Architecture overrides shared by `train` and `eval`.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub shift_enc: Option<usize>,
    #[arg(long)]
    pub shift_dec: Option<usize>,
    #[arg(long, value_enum)]
    pub shift_mode: Option<ShiftArg>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub score_scale: Option<ScaleArg>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
}

impl ModelArgs {
    pub fn is_empty(&self) -> bool {
        self.window.is_none()
            && self.shift_enc.is_none()
            && self.shift_dec.is_none()
            && self.shift_mode.is_none()
            && self.fusion.is_none()
            && self.score_scale.is_none()
            && self.model_dim.is_none()
            && self.heads.is_none()
            && self.encoder_layers.is_none()
            && self.decoder_layers.is_none()
            && self.queries.is_none()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Max gradient norm; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Fraction of videos held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for the detection file, report and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// `start:step:end` or a comma list.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Greedy NMS at this tIoU before scoring.
    #[arg(long)]
    pub nms: Option<f64>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Model config JSON or a `train` manifest the checkpoint must match.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Write the per-operation report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub model_dim: usize,
    /// Timed repetitions per configuration (at least 10).
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("APF_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Maps an error chain to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use taloc_core::Error as E;
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return EXIT_CHECK;
        }
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } | E::NonFiniteLoss { .. } | E::DegenerateRow { .. } => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_USAGE;
        }
    }
    EXIT_USAGE
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
