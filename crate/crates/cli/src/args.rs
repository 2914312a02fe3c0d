use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dsfeat::losses::{DistanceMode, SchedulePolicy};
use dsfeat::pipeline::Variant;

#[derive(Debug, Parser)]
#[command(name = "dsfeat", version, about = "Stability-map feature selection for loop closure detection")]
pub struct Cli {
    /// `key=value` file; each key sets the subcommand flag of the same name
    /// unless that flag is also given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus directory.
    GenSynth(GenSynthArgs),
    /// Train the stability network on a corpus directory.
    Train(TrainArgs),
    /// Predict activation maps for one image or a whole corpus.
    Infer(InferArgs),
    /// Keep the top-k features of one image by a selection method.
    Select(SelectArgs),
    /// Build a visual vocabulary from a corpus's descriptors.
    BuildVocab(BuildVocabArgs),
    /// Retrieve loop candidates for every frame of a corpus.
    Retrieve(RetrieveArgs),
    /// Geometrically verify retrieved candidates.
    Verify(VerifyArgs),
    /// Precision-recall curve and AUC of verification scores.
    Pr(PrArgs),
    /// Rotation error and offset deviation of a trajectory.
    TrajEval(TrajEvalArgs),
    /// Finite-difference check of the network gradients.
    GradCheck(GradCheckArgs),
    /// Render an activation map as an 8-bit PGM.
    Heatmap(HeatmapArgs),
    /// Compare selection methods end to end on one or more corpora.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    /// Frames before the first revisit; each visits a new place.
    #[arg(long, default_value_t = 130)]
    pub first_pass: usize,
    /// Place revisited by the first frame after the first pass.
    #[arg(long, default_value_t = 30)]
    pub revisit_from: usize,
    #[arg(long, default_value_t = 5)]
    pub heldout_every: usize,
    /// Probability that a moving object is labeled by the segmenter.
    #[arg(long, default_value_t = 0.75)]
    pub label_recall: f64,
}

#[derive(Debug, Args)]
pub struct StaticArg {
    /// Comma-separated static categories; defaults to the street partition.
    #[arg(long = "static", value_name = "NAMES")]
    pub static_categories: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// Matching distance: sparse or dense.
    #[arg(long, default_value = "sparse")]
    pub mode: DistanceMode,
    /// Loss-weight schedule policy.
    #[arg(long, default_value = "decay_semantic")]
    pub policy: SchedulePolicy,
    /// Distance given to pairs that fail verification in sparse mode.
    #[arg(long, default_value_t = 0.0)]
    pub unverified_distance: f64,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    /// Seed of the weight initialization.
    #[arg(long, default_value_t = 7)]
    pub net_seed: u64,
    /// Query features kept per pair in sparse mode.
    #[arg(long, default_value_t = 500)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    /// Negatives are at least this many frames from the query.
    #[arg(long, default_value_t = 10)]
    pub gap: usize,
    /// Seed of triplet mining and epoch shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-epoch loss log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub stat: StaticArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Single P6 image; requires --out.
    #[arg(long, conflicts_with = "corpus")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub out: Option<PathBuf>,
    /// Corpus directory; requires --out-dir.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub descriptors: PathBuf,
    /// trad, seman or ours.
    #[arg(long, default_value = "trad")]
    pub method: Variant,
    #[arg(long, default_value_t = 500)]
    pub k: usize,
    /// Image width; taken from the map when one is given.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Stability map (P5) for seman.
    #[arg(long)]
    pub stability: Option<PathBuf>,
    /// Label map (P5) for seman, with --categories.
    #[arg(long, conflicts_with = "stability", requires = "categories")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub categories: Option<PathBuf>,
    /// Activation map for ours.
    #[arg(long)]
    pub activation: Option<PathBuf>,
    #[arg(long)]
    pub out_keypoints: PathBuf,
    #[arg(long)]
    pub out_descriptors: PathBuf,
    #[command(flatten)]
    pub stat: StaticArg,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows sampled for clustering.
    #[arg(long, default_value_t = 5000)]
    pub rows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// trad, seman or ours.
    #[arg(long, default_value = "trad")]
    pub method: Variant,
    #[arg(long, default_value_t = 500)]
    pub top_k: usize,
    /// Directory of per-frame activation maps for ours.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[command(flatten)]
    pub stat: StaticArg,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Candidates within this many frames of the query are skipped.
    #[arg(long, default_value_t = 10)]
    pub gap: usize,
    #[arg(long, default_value_t = 1)]
    pub top_n: usize,
    /// CSV `query_id,candidate_id,similarity`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Candidates written by `retrieve`.
    #[arg(long)]
    pub candidates: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, default_value_t = 8)]
    pub min_inliers: usize,
    /// RANSAC seed, mixed with each query id.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Loop ground truth CSV.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajEvalArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Path length per rotation-error segment, metres.
    #[arg(long, default_value_t = 100.0)]
    pub step: f64,
    /// Write the metrics here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// sparse, dense or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    /// First seed checked.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 4)]
    pub per_param: usize,
    #[arg(long, default_value_t = 4)]
    pub base_channels: usize,
    /// Side of the square test images.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub activation: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Corpus directories, one report row each.
    #[arg(long, required = true, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    /// Network weights for ours; activations are predicted per frame.
    #[arg(long, conflicts_with = "activations")]
    pub weights: Option<PathBuf>,
    /// Directory of cached activation maps for ours (single corpus only).
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long, default_value = "trad,seman,ours")]
    pub variants: String,
    #[arg(long, default_value_t = 500)]
    pub top_k: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab_k: usize,
    #[arg(long, default_value_t = 0)]
    pub vocab_seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub vocab_rows: usize,
    #[arg(long, default_value_t = 10)]
    pub gap: usize,
    #[arg(long, default_value_t = 8)]
    pub min_inliers: usize,
    /// Comparison table CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each variant's scores as `<sequence>.<variant>.csv` here.
    #[arg(long)]
    pub scores_dir: Option<PathBuf>,
    #[command(flatten)]
    pub stat: StaticArg,
}
