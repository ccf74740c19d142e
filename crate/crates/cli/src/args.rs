use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lfm", version, about = "GAN training with latent feature maximization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a GAN from a `key = value` config file.
    Train(TrainArgs),
    /// Emit orthogonal latent pairs and probe the rejection rate.
    Pairs(PairsArgs),
    /// Fréchet distance of samples or a checkpoint against reference statistics.
    Fid(FidArgs),
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Baseline vs regularized sweep on the 2-D ring.
    Bench2d(BenchArgs),
    /// Compute and cache reference statistics for a dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Config file; every key has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics, checkpoints, plots and the manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Any config key as a flag, e.g. `--lambda-g 0 --lfm-mode off`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PairsArgs {
    #[arg(long, default_value_t = 100)]
    pub z_dim: usize,
    /// Number of pairs to emit.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// `abs` or `no_abs`.
    #[arg(long, default_value = "abs")]
    pub variant: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pair CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Monte-Carlo trials per variant for the rejection probe; 0 skips it.
    #[arg(long, default_value_t = 1_000_000)]
    pub trials: usize,
    /// Also write the probe as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FidArgs {
    /// Sample source: `raw:PATH`, `folder:PATH` or `ring[...]`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub samples: Option<String>,
    /// Generate the samples from this checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Cached reference statistics.
    #[arg(long, conflicts_with = "reference")]
    pub ref_stats: Option<PathBuf>,
    /// Reference dataset, fitted on the fly.
    #[arg(long)]
    pub reference: Option<String>,
    /// `identity`, `random_cnn[:SEED]` or `trained_df:CHECKPOINT`.
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long, default_value_t = lfm_core::eval::DEFAULT_EVAL_N)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Ring reference size.
    #[arg(long, default_value_t = 10_000)]
    pub ref_n: usize,
    /// Append the result to this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "samples")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long)]
    pub subset_n: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub ref_n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    /// Add the generator-only arm.
    #[arg(long)]
    pub g_only: bool,
    #[arg(long, default_value = "bench2d")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 512)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 16)]
    pub z_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Further config overrides applied to every arm.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}
