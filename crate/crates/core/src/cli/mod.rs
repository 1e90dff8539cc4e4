//! The `wsed` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure (non-finite values, failed gradient check).

mod commands;
mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wsed", version, about = "Weakly-supervised sound event detection")]
pub struct Cli {
    /// `key = value` file supplying defaults for any flag (flags win).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for feature extraction and synthesis.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with known event annotations.
    Synth(SynthArgs),
    /// Train a model from weak labels.
    Train(TrainArgs),
    /// Predict frame probabilities, weak labels and events.
    Predict(PredictArgs),
    /// Score estimated annotations against references.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every operator.
    Gradcheck(GradcheckArgs),
    /// Export input-gradient saliency maps.
    Saliency(SaliencyArgs),
    /// Train once per (strong, weak) loss-weight pair.
    Sweep(SweepArgs),
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn dropout_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("dropout must be in [0, 1), got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a non-negative number, got {s}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Spectrally separated classes.
    Separated,
    /// Crowded, overlapping spectra.
    Overlapping,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, value_parser = positive_usize)]
    pub clips: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum number of events per clip.
    #[arg(long, value_parser = positive_usize)]
    pub polyphony: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub clip_seconds: Option<f64>,
    #[arg(long, value_parser = positive_usize)]
    pub sample_rate: Option<usize>,
    /// Split name recorded in the manifest.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Crnn,
    Baseline,
}

/// Feature, model and optimisation settings shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Training manifest (weak labels are used; strong ones are ignored).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation manifest with strong annotations.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_parser = dropout_rate)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = positive_usize)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated filters per convolutional block.
    #[arg(long)]
    pub conv_filters: Option<String>,
    /// Comma-separated frequency pooling per block; must multiply to the band count.
    #[arg(long)]
    pub conv_pools: Option<String>,
    #[arg(long, value_parser = positive_usize)]
    pub gru_units: Option<usize>,
    /// Hidden widths of the strong head (the class layer is appended).
    #[arg(long)]
    pub strong_hidden: Option<String>,
    /// Hidden widths of the weak head (the class layer is appended).
    #[arg(long)]
    pub weak_hidden: Option<String>,
    #[arg(long, value_parser = positive_usize)]
    pub mel_bands: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub window_ms: Option<f64>,
    #[arg(long, value_parser = positive)]
    pub segment: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_parser = non_negative)]
    pub strong_weight: Option<f64>,
    #[arg(long, value_parser = non_negative)]
    pub weak_weight: Option<f64>,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridFormat {
    /// `WSEDF1` binary matrix.
    Binary,
    Csv,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest listing the clips to process.
    #[arg(long, conflicts_with = "wav")]
    pub manifest: Option<PathBuf>,
    /// Individual WAV files.
    #[arg(long, num_args = 1..)]
    pub wav: Vec<PathBuf>,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
    #[arg(long, value_parser = non_negative)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<GridFormat>,
    /// Median filter width in frames (odd; off by default).
    #[arg(long)]
    pub median_filter: Option<usize>,
    /// Merge same-class events separated by at most this many seconds.
    #[arg(long, value_parser = non_negative)]
    pub fill_gaps: Option<f64>,
    /// Drop events shorter than this many seconds.
    #[arg(long, value_parser = non_negative)]
    pub min_duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ref_strong: Option<PathBuf>,
    #[arg(long)]
    pub ref_weak: Option<PathBuf>,
    #[arg(long)]
    pub est_strong: Option<PathBuf>,
    #[arg(long)]
    pub est_weak: Option<PathBuf>,
    /// Segment length in seconds.
    #[arg(long, value_parser = positive)]
    pub segment: Option<f64>,
    /// Clip length in seconds.
    #[arg(long, value_parser = positive)]
    pub duration: Option<f64>,
    /// Also write the scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random instances per operator.
    #[arg(long, value_parser = positive_usize)]
    pub seeds: Option<usize>,
    /// Corrupt the backward pass of this operator (to test the checker).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadChoice {
    Strong,
    Weak,
    Both,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    /// Class name or index.
    #[arg(long)]
    pub class: String,
    #[arg(long, value_enum, default_value = "both")]
    pub head: HeadChoice,
    /// Output path prefix; `.<head>.wsedf` and `.<head>.png` are appended.
    #[arg(long, default_value = "saliency")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Weight values; each pairs with 1 on either head.
    #[arg(long)]
    pub weights: Option<String>,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
