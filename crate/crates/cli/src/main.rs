//! `sigclass`: simulate signals, render spectrograms, train and evaluate the
//! classifier, run amplitude sweeps and the drift-search baseline.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "sigclass", version, about = "Narrowband signal simulation and classification pipeline")]
pub struct Cli {
    /// Worker threads for generation, feature extraction and inference
    /// (default: all cores). Results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file with defaults for any flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Simulate a labeled corpus or an amplitude sweep.
    Generate(GenerateArgs),
    /// Render one IQ file as a PGM spectrogram image.
    Render(RenderArgs),
    /// Train a model, or a fold ensemble, on a corpus.
    Train(TrainArgs),
    /// Score a model on a corpus, or score a predictions CSV.
    Eval(EvalArgs),
    /// Evaluate a model across an amplitude sweep.
    Sweep(SweepArgs),
    /// Run the linear drift-search detector over a corpus.
    Detect(DetectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Output directory (manifest.jsonl and data/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated class names (default: all seven).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Simulations per class for a corpus.
    #[arg(long, default_value_t = 0)]
    pub count_per_class: usize,
    /// Generate an amplitude sweep instead of a corpus.
    #[arg(long)]
    pub sweep: bool,
    /// Simulations per class and amplitude for a sweep.
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    /// Comma-separated sweep amplitudes A/13 (default: 14 log-spaced values).
    #[arg(long, value_delimiter = ',')]
    pub amplitudes: Vec<f64>,
    /// Assign stratified k-fold labels to the corpus.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum, default_value_t = PhaseArg::Accumulate)]
    pub phase_mode: PhaseArg,
    /// Split label written into the manifest (train, test).
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Fix A/13 for every non-noise simulation.
    #[arg(long, conflicts_with = "amp_range")]
    pub amplitude: Option<f64>,
    /// Draw A/13 uniformly from LO,HI for every non-noise simulation.
    #[arg(long, value_name = "LO,HI", value_parser = parse_range)]
    pub amp_range: Option<(f64, f64)>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseArg {
    Accumulate,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Power,
    Phase,
}

#[derive(Debug, Args, Serialize)]
pub struct SpectroArgs {
    /// Spectrogram rows (time slices).
    #[arg(long, default_value_t = 384)]
    pub rows: usize,
    /// Spectrogram columns (FFT length).
    #[arg(long, default_value_t = 512)]
    pub cols: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    /// Interleaved int8 IQ file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Channel::Power)]
    pub channel: Channel,
    #[command(flatten)]
    pub spectro: SpectroArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Learning-rate multiplier applied at 40% and 70% of the epochs.
    #[arg(long, default_value_t = 0.2)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    #[arg(long, default_value_t = 1)]
    pub widen: usize,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Model input height after downsampling.
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    /// Model input width after downsampling.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Use the log-power channel only.
    #[arg(long)]
    pub no_phase: bool,
    /// Members to train; member m validates on fold m.
    #[arg(long, default_value_t = 1)]
    pub ensemble: usize,
    /// Folds to create when the corpus has none.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[command(flatten)]
    pub spectro: SpectroArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Weight file, or a directory of model_*.wrnw files (averaged).
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, requires = "model")]
    pub data: Option<PathBuf>,
    /// Only records with this split (train, test, fold_N); default all.
    #[arg(long)]
    pub split: Option<String>,
    /// CSV with `actual,predicted` class names to score instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub spectro: SpectroArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Weight file, or a directory of model_*.wrnw files (averaged).
    #[arg(long)]
    pub model: PathBuf,
    /// Sweep directory produced by `generate --sweep`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub spectro: SpectroArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// Corpus directory to scan.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed score threshold.
    #[arg(long, conflicts_with = "far")]
    pub threshold: Option<f64>,
    /// Calibrate the threshold to this false-alarm rate on noise records.
    #[arg(long)]
    pub far: Option<f64>,
    /// Noise corpus for calibration (default: the noise records of --data).
    #[arg(long, requires = "far")]
    pub calibrate: Option<PathBuf>,
    /// Largest drift searched, bins per row.
    #[arg(long, default_value_t = 0.5)]
    pub max_drift: f64,
    /// Drift hypotheses over [-max, max].
    #[arg(long, default_value_t = 385)]
    pub drift_steps: usize,
    #[command(flatten)]
    pub spectro: SpectroArgs,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
