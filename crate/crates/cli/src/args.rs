//! Command-line surface. Optional flags left unset fall back to the config
//! file, then to the built-in default shown in each help line.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use errdisc::eval::ClusterMode;

#[derive(Debug, Parser)]
#[command(name = "errdisc", version, about = "Open-world error type discovery for dialogue datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-mixture dataset as JSON lines
    Synth(SynthArgs),
    /// Hold out unknown classes and write the split manifest
    Split(SplitArgs),
    /// Train the encoder; writes a checkpoint and a per-epoch history CSV
    Train(TrainArgs),
    /// Cluster with a checkpoint, or score a predictions file, and report metrics
    Eval(EvalArgs),
    /// Dump the label-based sample ranking pools as TSV
    Rank(RankArgs),
    /// Name and define novel clusters through a chat-completion endpoint
    Define(DefineArgs),
    /// Split, train, cluster and evaluate in one go
    Run(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config; flags on the command line override its values [default: none]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for embedding [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Log filter: error, warn, info, debug or trace
    #[arg(long, default_value = "warn")]
    pub log_level: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset (JSON lines)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Number of classes [default: 8]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Samples per class [default: 200]
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Feature dimension [default: 16]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Distance between class means in units of sigma [default: 6]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Per-class noise standard deviation [default: 1]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Summary-view noise relative to sigma [default: 1]
    #[arg(long)]
    pub summary_noise: Option<f64>,
    /// Share of each class marked as test [default: 0.25]
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input dataset (JSON lines)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Output split manifest (JSON)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Fraction of classes held out as unknown [default: 0.25]
    #[arg(long)]
    pub openness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Lbsr,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClusterModeArg {
    Transductive,
    TestOnly,
}

impl From<ClusterModeArg> for ClusterMode {
    fn from(m: ClusterModeArg) -> Self {
        match m {
            ClusterModeArg::Transductive => ClusterMode::Transductive,
            ClusterModeArg::TestOnly => ClusterMode::TestOnly,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Training epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Anchors per batch [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Margin subtracted from cross-class similarities [default: 0.3]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Cross-entropy weight [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Contrastive temperature [default: 1]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Hidden width of both input towers [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Representation dimension [default: 16]
    #[arg(long)]
    pub rep_dim: Option<usize>,
    /// Neighbors used for ranking inconsistency [default: 10]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Counterpart sampling [default: lbsr]
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Train on cross-entropy alone [default: false]
    #[arg(long)]
    pub ce_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input dataset (JSON lines)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Split manifest; made from --openness and --seed when absent [default: none]
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Fraction of unknown classes when no manifest is given [default: 0.25]
    #[arg(long)]
    pub openness: Option<f64>,
    /// Output directory for encoder.ckpt, history.csv, split.json and config.toml
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained encoder to embed and cluster with; needs --data [default: none]
    #[arg(long, value_name = "FILE", requires = "data")]
    pub checkpoint: Option<PathBuf>,
    /// Scored cluster assignments, JSON lines with id, cluster, label [default: none]
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Input dataset (JSON lines) [default: none]
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Split manifest; made from --openness and --seed when absent, and names the
    /// known classes for --predictions [default: none]
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Comma-separated known classes for --predictions without --split [default: none]
    #[arg(long, value_delimiter = ',', conflicts_with = "split")]
    pub known: Option<Vec<String>>,
    /// Fraction of unknown classes when no manifest is given [default: 0.25]
    #[arg(long)]
    pub openness: Option<f64>,
    /// Clusters to form [default: number of classes in the dataset]
    #[arg(long)]
    pub total_classes: Option<usize>,
    /// Which representations the clustering is fitted on [default: transductive]
    #[arg(long, value_enum)]
    pub cluster_mode: Option<ClusterModeArg>,
    /// Output report (JSON)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write per-sample predictions (JSON lines) in checkpoint mode [default: none]
    #[arg(long, value_name = "FILE")]
    pub predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input dataset (JSON lines)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Split manifest; made from --openness and --seed when absent [default: none]
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Fraction of unknown classes when no manifest is given [default: 0.25]
    #[arg(long)]
    pub openness: Option<f64>,
    /// Rank encoder representations instead of raw context features [default: none]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Neighbors used for inconsistency [default: 10]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Output table (TSV)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DefineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset holding context_text and summary_text (JSON lines)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Predictions written by `eval --predictions-out` or `run`
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// JSON array of {"name", "definition"} for known error types (at least 3)
    #[arg(long, value_name = "FILE")]
    pub known_definitions: PathBuf,
    /// Output definitions (JSON)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Minimum cluster size for a definition request [default: 10]
    #[arg(long)]
    pub threshold: Option<usize>,
    /// Contexts quoted per prompt [default: 10]
    #[arg(long)]
    pub max_contexts: Option<usize>,
    /// Answer from the deterministic offline stub [default: false]
    #[arg(long)]
    pub stub: bool,
    /// Chat-completion URL [default: http://localhost:8000/v1/chat/completions]
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name [default: meta-llama/Llama-3.1-8B-Instruct]
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token [default: ERRDISC_API_TOKEN]
    #[arg(long)]
    pub token_env: Option<String>,
    /// Sampling temperature [default: 0]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Retries after the first attempt [default: 3]
    #[arg(long)]
    pub max_retries: Option<usize>,
    /// Per-request timeout in seconds [default: 60]
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Requests in flight at once [default: 4]
    #[arg(long)]
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input dataset; synthesized from the config's [synth] section when absent [default: none]
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Fraction of classes held out as unknown [default: 0.25]
    #[arg(long)]
    pub openness: Option<f64>,
    /// Clusters to form [default: number of classes in the dataset]
    #[arg(long)]
    pub total_classes: Option<usize>,
    /// Which representations the clustering is fitted on [default: transductive]
    #[arg(long, value_enum)]
    pub cluster_mode: Option<ClusterModeArg>,
    /// Output directory for all artifacts
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}
