//! `im2sp` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "im2sp", version, about = "Discrete image-to-speech-unit captioning")]
#[command(color = clap::ColorChoice::Never)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData(GenData),
    /// Fit a K-means codebook to speech features or image patches.
    TrainCodebook(TrainCodebook),
    /// Turn features or images into unit streams.
    Encode(Encode),
    /// Pretrain a decoder to produce caption words from image units.
    PretrainText(PretrainText),
    /// Train a speech-unit decoder, from scratch or from a text checkpoint.
    Train(Train),
    /// Decode speech units for every image in a manifest.
    Generate(Generate),
    /// Score hypothesis unit streams against references.
    Evaluate(Evaluate),
    /// Storage cost of raw versus unit representations.
    BitsReport(BitsReport),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Modality {
    Speech,
    Image,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Per-coordinate noise bound; defaults to a tenth of half the minimum
    /// centroid distance.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainCodebook {
    #[arg(long, value_enum)]
    modality: Modality,
    #[arg(long)]
    k: usize,
    /// Corpus manifest written by gen-data.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = im2sp::quantizer::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = im2sp::quantizer::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
}

#[derive(Args, Debug)]
struct Encode {
    #[arg(long, value_enum)]
    modality: Modality,
    #[arg(long)]
    codebook: PathBuf,
    /// A corpus manifest, or a single feature file / PPM image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for a manifest, output unit file for a single input.
    #[arg(long)]
    out: PathBuf,
    /// Keep repeated speech units.
    #[arg(long)]
    no_dedup: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// `key=value` file with model and training settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-step loss trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainText {
    /// Image-unit manifest written by `encode --modality image`.
    #[arg(long)]
    images: PathBuf,
    /// Corpus manifest holding the captions.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    images: PathBuf,
    /// Speech-unit manifest written by `encode --modality speech`.
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Text-pretrained checkpoint to transfer from; random init without it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct Generate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Defaults to the model's maximum unit length.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct Evaluate {
    /// `id<TAB>units` lines.
    #[arg(long)]
    hyp_manifest: PathBuf,
    /// `id<TAB>units[<TAB>units...]` lines.
    #[arg(long)]
    ref_manifest: PathBuf,
    /// Also write the report as `key=value` text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BitsReport {
    #[arg(long, default_value_t = 224)]
    image_h: u64,
    #[arg(long, default_value_t = 224)]
    image_w: u64,
    #[arg(long, default_value_t = 3)]
    channels: u64,
    #[arg(long, default_value_t = 8)]
    image_depth: u64,
    #[arg(long, default_value_t = 8)]
    patch: u64,
    #[arg(long, default_value_t = 8192)]
    image_units: u64,
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u64,
    #[arg(long, default_value_t = 16)]
    audio_depth: u64,
    #[arg(long, default_value_t = 100)]
    mel_fps: u64,
    #[arg(long, default_value_t = 80)]
    mel_dims: u64,
    #[arg(long, default_value_t = 32)]
    mel_depth: u64,
    #[arg(long, default_value_t = 320)]
    factor: u64,
    #[arg(long, default_value_t = 200)]
    speech_units: u64,
    /// Measured unit count after repetition removal.
    #[arg(long)]
    dedup_len: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(im2sp::Error),
}

impl From<im2sp::Error> for CliError {
    fn from(e: im2sp::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(im2sp::Error::Diverged { .. }) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
