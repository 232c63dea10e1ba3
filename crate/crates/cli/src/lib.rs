//! Command-line front end: synthetic data, preprocessing, splits, training,
//! evaluation, class maps, feature export, ablation and gradient checks.
//!
//! Exit codes: 0 success, 1 internal or numeric failure, 2 usage or I/O error.

pub mod commands;
pub mod formats;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use duplo::model::Variant;

pub use commands::run;

/// Failure caused by the caller: bad flags, unreadable or malformed files.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "duplo", version, about = "Dual-branch land cover classifier for satellite image time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cube and label raster.
    Synth(SynthArgs),
    /// Gap-fill, add NDVI and normalize a cube.
    Preprocess(PreprocessArgs),
    /// Assign objects to train/val/test.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split part.
    Evaluate(EvaluateArgs),
    /// Classify every pixel of a cube.
    Predict(PredictArgs),
    /// Export the concatenated branch features of labeled pixels.
    Features(FeaturesArgs),
    /// Train and test all four model variants on one split.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub timestamps: usize,
    #[arg(long, default_value_t = 10)]
    pub objects_per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub min_size: usize,
    #[arg(long, default_value_t = 6)]
    pub max_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub cloud_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub gapfill: bool,
    #[arg(long)]
    pub ndvi: bool,
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub train: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Defaults to 300, or 30 with --small.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Desk-scale profile: d = 64, 30 epochs.
    #[arg(long)]
    pub small: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// full, noaux, cnn or rnn.
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub part: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    /// Class map; a `.ppm` preview is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `.csv` selects the text table, anything else the binary one.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Table CSV; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub timestamps: usize,
    #[arg(long, default_value_t = 5)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: duplo::Error| e.to_string())
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use duplo::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::BadMagic { .. } | E::UnsupportedVersion(_) | E::Truncated(_) | E::DimOverflow(_) | E::Format(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Parses arguments, runs the command, reports errors on stderr and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
