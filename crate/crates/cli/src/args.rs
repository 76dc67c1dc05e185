use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use simembed::losses::{Kernel, LossTag};

#[derive(Debug, Parser)]
#[command(
    name = "simembed",
    version,
    about = "Speaker embeddings trained against subjective similarity scores"
)]
pub struct Cli {
    /// Seed for every random draw (ignored by deterministic commands).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for training and extraction.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted world: frames, listener answers, ground truth.
    Synth(SynthArgs),
    /// Average raw answers into a similarity matrix.
    Aggregate(AggregateArgs),
    /// Train an embedding network.
    Train(TrainArgs),
    /// Write per-speaker d-vectors from a checkpoint.
    Extract(ExtractArgs),
    /// Correlate learned kernels with a similarity matrix.
    Eval(EvalArgs),
    /// Similarity graph: MDS layout, edge list and vertex degrees.
    Graph(GraphArgs),
    /// Score histogram of raw answers, globally or for one pair.
    Histogram(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub speakers: usize,
    /// Closed (training) speakers; they take the lowest indices.
    #[arg(long, default_value_t = 13)]
    pub closed: usize,
    /// Latent identity dimension.
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    /// Acoustic feature dimension.
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Per-dimension frame noise std.
    #[arg(long, default_value_t = 0.3)]
    pub noise_std: f64,
    /// Frames per speaker.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Probability that a frame is voiced.
    #[arg(long, default_value_t = 0.7)]
    pub voiced_rate: f64,
    /// Answers per unordered pair.
    #[arg(long, default_value_t = 10)]
    pub listeners: usize,
    /// Std of listener noise on the raw score scale.
    #[arg(long, default_value_t = 0.5)]
    pub answer_noise: f64,
    /// Integer score bound v; answers lie in [-v, v].
    #[arg(long, default_value_t = 3)]
    pub score_bound: i64,
    /// Cluster preset giving about 70% negative similarities; the
    /// individual cluster flags still override it.
    #[arg(long)]
    pub skewed: bool,
    /// Number of latent clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Squared norm of the cluster centres.
    #[arg(long)]
    pub cluster_strength: Option<f64>,
    /// Std of speakers around their cluster centre.
    #[arg(long)]
    pub spread: Option<f64>,
    /// Global scale on latent vectors.
    #[arg(long)]
    pub latent_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Raw answers CSV.
    #[arg(long)]
    pub answers: PathBuf,
    /// Output matrix CSV; the sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Roster manifest supplying speaker count, labels and closed count.
    #[arg(long, required_unless_present = "speakers")]
    pub manifest: Option<PathBuf>,
    /// Speaker count when no manifest is given.
    #[arg(long, conflicts_with = "manifest")]
    pub speakers: Option<usize>,
    /// Closed speaker count when no manifest is given (default: all).
    #[arg(long, requires = "speakers")]
    pub closed: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub score_bound: i64,
    /// Minimum answers required for every pair.
    #[arg(long, default_value_t = simembed::scoring::DEFAULT_MIN_ANSWERS)]
    pub min_answers: usize,
    /// Divide by the score bound before writing.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Roster manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Normalized similarity matrix CSV.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Output directory for checkpoint.json, train_log.csv and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossTag>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Voiced frames sampled per speaker per matrix-loss step.
    #[arg(long)]
    pub frames_per_speaker: Option<usize>,
    /// Mini-batch size for frame-level losses.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Extra cross-entropy weight for matrix losses.
    #[arg(long)]
    pub sce_weight: Option<f64>,
    #[arg(long)]
    pub kernel: Option<Kernel>,
    /// Hidden layer widths: `full`, `small`, or a list such as `32,32,32,4`.
    /// The last entry is the bottleneck.
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output CSV: `speaker,label,d1..dN`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Similarity matrix CSV; unnormalized input is normalized on the fly.
    #[arg(long)]
    pub matrix: PathBuf,
    /// Output directory for report.json and scatter.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sigmoid")]
    pub kernel: Kernel,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Similarity matrix CSV; unnormalized input is normalized on the fly.
    #[arg(long)]
    pub matrix: PathBuf,
    /// Output directory for layout.csv, edges.csv and degrees.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long)]
    pub answers: PathBuf,
    /// Restrict to one unordered pair, e.g. `0,5`.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<(usize, usize)>,
    /// Also write the histogram CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `i,j`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(a)?, parse(b)?))
}
