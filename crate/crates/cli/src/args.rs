use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "foleyflow", version, about = "Synthetic video/text-to-audio flow matching")]
pub struct Cli {
    /// Worker threads for data-parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Also write the JSON report to this file (overwritten).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a manifest of synthetic scenes.
    GenData(GenDataArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Generate latents for one scene of a manifest.
    Sample(SampleArgs),
    /// Fréchet distance between two embedding files.
    EvalFd(EvalFdArgs),
    /// Inception Score of a logit file.
    EvalIs(EvalIsArgs),
    /// Paired KL divergence between two logit files.
    EvalKl(EvalKlArgs),
    /// Onset accuracy, AP and F1 of generated audio or latents.
    EvalOnset(EvalOnsetArgs),
    /// Cross-correlation lag between generated and reference envelopes.
    EvalLag(EvalLagArgs),
    /// List the tensors of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 8.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    /// Seed of the class tables (features, textures) shared by all scenes.
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    /// Fraction of scenes stored without video (audio-text samples).
    #[arg(long, default_value_t = 0.0)]
    pub no_video_fraction: f64,
    /// Fraction of scenes stored without text.
    #[arg(long, default_value_t = 0.0)]
    pub no_text_fraction: f64,
    /// Preset whose feature widths are used when rendering with --render.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Also write rendered tensors next to the manifest.
    #[arg(long)]
    pub render: bool,
    /// Manifest path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint written at the end (and every --checkpoint-every steps).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// `key = value` file with `model.*` and `train.*` overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    #[arg(long)]
    pub dup_factor: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the model initialization.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Train without synchronization features.
    #[arg(long)]
    pub no_sync: bool,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Training log (one JSON object per step).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest providing the conditioning scene.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Clip length in seconds, 1 to 60.
    #[arg(long, default_value_t = 8.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 25)]
    pub n_steps: usize,
    #[arg(long, default_value_t = 4.5)]
    pub cfg_strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub with_video: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub with_text: bool,
    /// Use the raw weights instead of the EMA weights.
    #[arg(long)]
    pub raw_weights: bool,
    /// Latent output; a decoded mel spectrogram goes to `<out>.mel`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalFdArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalIsArgs {
    #[arg(long)]
    pub logits: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Direction {
    GtGen,
    GenGt,
}

#[derive(Debug, Args)]
pub struct EvalKlArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::GtGen)]
    pub direction: Direction,
}

#[derive(Debug, Args)]
pub struct EvalOnsetArgs {
    /// Generated latent file (channel 0 envelope) or a WAV file.
    #[arg(long)]
    pub gen: PathBuf,
    /// Manifest holding the reference event times.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Reference times as a comma-separated list, instead of a manifest.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Matching tolerance in seconds.
    #[arg(long, default_value_t = 0.1)]
    pub tol: f64,
    /// Latent channel carrying the event envelope.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

#[derive(Debug, Args)]
pub struct EvalLagArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Frame rate used when the files do not record one.
    #[arg(long, default_value_t = 31.25)]
    pub fps: f64,
    #[arg(long, default_value_t = 1.0)]
    pub max_lag: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}
