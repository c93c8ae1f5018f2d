use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Lip-landmark assisted active speaker detection.
#[derive(Debug, Parser)]
#[command(name = "laser", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural audiovisual corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Filter tracks and split clips by background noise level.
    Curate(CurateArgs),
    /// Train and evaluate once per value of a swept setting.
    Ablate(AblateArgs),
    /// Dump encoded lip maps of a synthetic track.
    Encode(EncodeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of tracks.
    #[arg(long, default_value_t = 200)]
    pub num_tracks: usize,
    /// Background noise RMS levels, assigned round-robin (full-scale samples).
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
    pub noise_rms: Vec<f64>,
    /// Seed for all generated content.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square crop size in pixels.
    #[arg(long, default_value_t = 112)]
    pub crop_size: usize,
    /// Fraction of tracks whose landmarks are removed.
    #[arg(long, default_value_t = 0.0)]
    pub landmark_dropout: f64,
    /// JSON run configuration; its `synth` section supplies the other
    /// generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Pooling,
    Ldi,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration. Defaults: learning rate 5e-5 with 0.995
    /// decay per epoch, loss weights 1 / 0.4 / 0.4, consistency weight 1
    /// (published settings).
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus directory holding a manifest.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; falls back to the configuration's `output_dir`,
    /// then `runs/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop the consistency term.
    #[arg(long)]
    pub no_consistency: bool,
    /// Train without any landmark input.
    #[arg(long, conflicts_with = "baseline")]
    pub no_lte: bool,
    /// Replace encoded lip maps with a landmark baseline.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory holding a manifest.
    #[arg(long)]
    pub corpus: PathBuf,
    /// standard (mAP), swap, shift or noise-split.
    #[arg(long, default_value = "standard")]
    pub protocol: String,
    /// Audio delays in seconds for the shift protocol.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    pub delays: Vec<f64>,
    /// Background RMS separating low from high noise (published setting).
    #[arg(long, default_value_t = 0.03)]
    pub rms_threshold: f64,
    /// Feed landmarks to the model; by default inference is landmark-free.
    #[arg(long)]
    pub with_lte: bool,
    /// Seed for the audio swap assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; prints to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Corpus directory holding a manifest.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `energy`, or `external:CMD` where CMD receives a WAV path and prints a
    /// JSON array of {start, end} seconds.
    #[arg(long, default_value = "energy")]
    pub vad: String,
    /// Background RMS separating low from high noise (published setting).
    #[arg(long, default_value_t = 0.03)]
    pub rms_threshold: f64,
    /// Shortest track kept, in seconds (published setting).
    #[arg(long, default_value_t = 0.2)]
    pub min_track_seconds: f64,
    /// Split path; prints to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON run configuration for every setting.
    #[arg(long)]
    pub config: PathBuf,
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluation corpus; defaults to the training corpus.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// `stage=1,2,3,4`, `S=1,2,4,8,16` or `lambda_c=0.2,0.4,0.6,0.8,1.0`.
    #[arg(long)]
    pub sweep: String,
    /// CSV path; prints to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Encode one generated track.
    #[arg(long)]
    pub demo: bool,
    /// Output directory.
    #[arg(long, default_value = "encode_demo")]
    pub out: PathBuf,
    /// Crop size of the generated track.
    #[arg(long, default_value_t = 112)]
    pub crop_size: usize,
    /// Frames in the generated track.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Aggregated channels per coordinate (published setting: 4).
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Curate(a) => commands::curate(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Encode(a) => commands::encode(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
