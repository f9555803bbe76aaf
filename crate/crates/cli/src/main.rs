//! `esmc`: localize target embeddings, cluster them, and score the result.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod cluster;
mod config;
mod embed;
mod eval;
mod localize;
mod output;
mod sweep;

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "esmc",
    version,
    about = "Embedding-selective multiple clustering"
)]
#[command(
    after_help = "Settings may also come from a flat TOML file (--config) whose keys \
match the long flag names with underscores, e.g. `learning_rate = 0.001`. Flags win over \
the file, and the file wins over built-in defaults. Relative paths in the file are resolved \
against the file's directory. ESMC_THREADS caps the worker threads."
)]
struct Cli {
    /// Flat TOML file with default values for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the (layer, position) whose logit-lens distribution carries a feature.
    Localize(LocalizeArgs),
    /// Project every image's state at the chosen cell into vocabulary space.
    Embed(EmbedArgs),
    /// K-means, pseudo-labels, and the clustering head over an embedding set.
    Cluster(ClusterArgs),
    /// Score cluster assignments against ground-truth labels (NMI, Rand index).
    Eval(EvalArgs),
    /// Cluster and score over a grid of alpha values and seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct LocalizeArgs {
    /// Directory of per-image dump directories.
    #[arg(long, value_name = "DIR")]
    pub dumps: Option<PathBuf>,
    /// Unembedding matrix, raw little-endian f32 [vocab][d_model].
    #[arg(long, value_name = "FILE")]
    pub unembed: Option<PathBuf>,
    /// Vocabulary, one token per line (line index = token id).
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Keywords for the feature, one per line; `#` starts a comment.
    #[arg(long, value_name = "FILE")]
    pub keywords: Option<PathBuf>,
    /// JSON map from keyword to token id (or list of subword ids).
    #[arg(long, value_name = "FILE")]
    pub sidecar: Option<PathBuf>,
    /// Feature name recorded in target.json, e.g. `color`.
    #[arg(long)]
    pub feature: Option<String>,
    /// Output directory for target.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// A keyword counts as a high logit when its value exceeds tau [default: 0.2].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Threshold raw logits instead of softmax probabilities.
    #[arg(long)]
    pub raw_logits: bool,
    /// Only scan positions inside the prompt-token span.
    #[arg(long)]
    pub restrict_to_text: bool,
    /// Also require the keyword to rank in the cell's top N tokens.
    #[arg(long, value_name = "N")]
    pub top_k_filter: Option<usize>,
    /// Use N randomly sampled dumps instead of all of them (10 to 20 is typical).
    #[arg(long, value_name = "N")]
    pub sample: Option<usize>,
    /// Seed for --sample [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    /// target.json written by `localize`.
    #[arg(long, value_name = "FILE")]
    pub target: Option<PathBuf>,
    /// Directory of per-image dump directories (the full dataset).
    #[arg(long, value_name = "DIR")]
    pub dumps: Option<PathBuf>,
    /// Unembedding matrix, raw little-endian f32 [vocab][d_model].
    #[arg(long, value_name = "FILE")]
    pub unembed: Option<PathBuf>,
    /// Vocabulary, one token per line; its length fixes the vocabulary size.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Output embedding-set directory (manifest.json + embeds.bin).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Store raw logits instead of softmax distributions.
    #[arg(long)]
    pub raw_logits: bool,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Fraction of each cluster, closest to its centroid, used as pseudo-labels
    /// [default: 0.1; 0.3 suits some datasets].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Head training epochs [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Head learning rate [default: 0.001].
    #[arg(long = "lr", alias = "learning-rate")]
    pub learning_rate: Option<f64>,
    /// Heavy-ball momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Hidden width of the head [default: 512].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// K-means iteration cap [default: 300].
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// K-means centroid-shift tolerance [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args)]
pub struct ClusterArgs {
    /// Embedding-set directory written by `embed`.
    #[arg(long, value_name = "DIR")]
    pub embeddings: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// Seed for K-means seeding and head initialization [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report plain K-means assignments; no pseudo-labels or head.
    #[arg(long)]
    pub skip_head: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// assignments.csv written by `cluster` (image_id,cluster).
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Ground truth CSV (image_id,criterion,label).
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Which criterion of the labels file to score against.
    #[arg(long)]
    pub criterion: Option<String>,
    /// Output directory for report.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// NMI normalization: arithmetic, geometric, or max [default: arithmetic].
    #[arg(long)]
    pub nmi_norm: Option<String>,
    /// run.json to echo into the report [default: run.json next to the predictions].
    #[arg(long, value_name = "FILE")]
    pub run: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Embedding-set directory written by `embed`.
    #[arg(long, value_name = "DIR")]
    pub embeddings: Option<PathBuf>,
    /// Ground truth CSV (image_id,criterion,label).
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Which criterion of the labels file to score against.
    #[arg(long)]
    pub criterion: Option<String>,
    /// Output directory for sweep.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated alpha values [default: 0.1,0.2,...,0.9].
    #[arg(long, value_name = "LIST")]
    pub alphas: Option<String>,
    /// Comma-separated seeds [default: 0,1,2,3,4].
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    /// NMI normalization: arithmetic, geometric, or max [default: arithmetic].
    #[arg(long)]
    pub nmi_norm: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ESMC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("ESMC_THREADS must be a positive integer, got `{v}`"))?;
        anyhow::ensure!(n > 0, "ESMC_THREADS must be a positive integer, got `{v}`");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Localize(a) => localize::run(a, file),
        Command::Embed(a) => embed::run(a, file),
        Command::Cluster(a) => cluster::run(a, file),
        Command::Eval(a) => eval::run(a, file),
        Command::Sweep(a) => sweep::run(a, file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
