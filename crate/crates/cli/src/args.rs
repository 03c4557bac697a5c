use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flynet::cardio::DiameterMode;
use flynet::data::SynthCorpusParams;
use flynet::train::TrainConfig;
use flynet::{AdamHyper, Arch, Precision};

#[derive(Debug, Parser)]
#[command(name = "flynet", version, about = "Heart segmentation and cardiac readouts for OCM fly recordings")]
pub struct Cli {
    /// Flat JSON file of flag values (keys are flag names); command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train one model on one fold of a corpus.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Full k-fold cross-validation.
    #[command(args_override_self = true)]
    Crossval(CrossvalArgs),
    /// Predict masks for every frame of a corpus with a trained checkpoint.
    #[command(args_override_self = true)]
    Segment(SegmentArgs),
    /// Area, diameter and IOU traces plus EDD/ESD/FS/HR.
    #[command(args_override_self = true)]
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every layer and both networks.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Cross-validate FlyNet and the FCN baseline with identical settings.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub datasets_per_stage: usize,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    /// Frame side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub gap_prob: f64,
    /// Override every dataset's frame rate.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Override every dataset's beat period, seconds.
    #[arg(long)]
    pub period: Option<f64>,
}

impl SynthArgs {
    pub fn corpus_params(&self) -> SynthCorpusParams {
        SynthCorpusParams {
            datasets_per_stage: self.datasets_per_stage,
            n_frames: self.frames,
            resolution: self.input_size,
            boundary_gap_prob: self.gap_prob,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    #[arg(long, default_value = "flynet")]
    pub arch: Arch,
    #[arg(long, default_value_t = 64)]
    pub base_width: usize,
    #[arg(long, default_value_t = 128)]
    pub input_size: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.001)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on augmented training samples per epoch.
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub shift_min: usize,
    #[arg(long, default_value_t = 50)]
    pub shift_max: usize,
    /// Train on raw frames only.
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainOpts {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            arch: self.arch,
            base_width: self.base_width,
            input_size: self.input_size,
            batch_size: self.batch_size,
            adam: AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.adam_eps },
            max_epochs: self.epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            seed: self.seed,
            binarize_threshold: self.threshold,
            augment: !self.no_augment,
            shift_range: (self.shift_min, self.shift_max),
            samples_per_epoch: self.samples_per_epoch,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Fold count used to carve out validation and test datasets.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub round: usize,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the threshold the checkpoint was trained with.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory of predicted (or any) PGM masks for one recording.
    #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
    pub masks: Option<PathBuf>,
    /// Ground-truth masks matched to `--masks` by file name, for the IOU column.
    #[arg(long, requires = "masks")]
    pub truth: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// Only this dataset of the manifest.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames per second; required with `--masks`, overrides the manifest otherwise.
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long, default_value_t = flynet::cardio::DEFAULT_SMOOTH_WINDOW)]
    pub smooth_window: usize,
    #[arg(long, default_value_t = flynet::cardio::DEFAULT_PROMINENCE)]
    pub prominence: f64,
    #[arg(long, default_value = "vertical_chord")]
    pub diameter_mode: DiameterMode,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "double")]
    pub precision: Precision,
    /// Seeds for the random instances, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Deliberately corrupt a gradient to exercise the checker.
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Corpus to use; without it a synthetic corpus is generated in memory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.15)]
    pub gap_prob: f64,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub datasets_per_stage: usize,
    /// Seed of the generated corpus; `--seed` drives splits and training.
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
}
