//! `snc` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 constraint error. Failures
//! print a JSON object `{"error": {"kind", "message"}}` on stderr.

mod alloc;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use snc_core::ChainRule;

#[global_allocator]
static GLOBAL: alloc::TrackingAlloc = alloc::TrackingAlloc;

#[derive(Parser)]
#[command(name = "snc", version, about = "Selective-neighbor clustering for category discovery")]
struct Cli {
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the cluster hierarchy and write it as JSON.
    Cluster(ClusterArgs),
    /// Estimate the total number of classes.
    EstimateK(EstimateArgs),
    /// Assign every instance to one of exactly K clusters (CSV `index,cluster`).
    Assign(AssignArgs),
    /// Score a predicted assignment against ground truth.
    Eval(EvalArgs),
    /// Write the pseudo labels of one hierarchy level (CSV `index,cluster`).
    Pseudo(PseudoArgs),
    /// Evaluate the contrastive losses on one batch.
    Loss(LossArgs),
    /// Time SNC label assignment against semi-supervised k-means.
    Bench(BenchArgs),
    /// Generate partially labelled synthetic blobs.
    GenBlobs(GenBlobsArgs),
}

#[derive(Args, Serialize, Clone)]
pub struct InputArgs {
    /// Feature file: binary, or CSV when the extension is .csv or .txt.
    #[arg(long)]
    pub features: PathBuf,
    /// Partial labels as `index,label` CSV. Missing rows or empty labels are unlabelled.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
pub struct ChainArgs {
    /// Chain length rule: sqrt, cbrt, half or fixed:<len>.
    #[arg(long, default_value = "sqrt")]
    #[serde(serialize_with = "as_display")]
    pub chain: ChainRule,
    /// Stop after this many levels above the singletons.
    #[arg(long)]
    pub max_levels: Option<usize>,
}

fn as_display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterAlgorithm {
    Snc,
    Finch,
}

#[derive(Args, Serialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    #[arg(long, value_enum, default_value = "snc")]
    pub algorithm: ClusterAlgorithm,
    /// Ground truth `index,label` CSV; adds per-level purity.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    /// Fraction of each labelled class kept labelled; the rest is validation.
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Silhouette subsample size.
    #[arg(long, default_value_t = 5000, conflicts_with = "no_sil_cap")]
    pub sil_cap: usize,
    /// Score the silhouette on every unlabelled instance.
    #[arg(long)]
    pub no_sil_cap: bool,
    /// Cap the merge band at this multiple of the chosen level's cluster count.
    #[arg(long)]
    pub band_multiplier: Option<f64>,
    /// Include wall-clock runtime in the output (breaks byte-for-byte reproducibility).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignAlgorithm {
    Snc,
    Kmeans,
    SemiKmeans,
}

#[derive(Args, Serialize)]
pub struct AssignArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "snc")]
    pub algorithm: AssignAlgorithm,
    /// Seed for the k-means algorithms.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lloyd iteration cap for the k-means algorithms.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSet {
    /// Every instance in the prediction file.
    All,
    /// Instances without a label in the `--seen` file.
    Unlabelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args, Serialize, Clone)]
pub struct EvalArgs {
    /// Predicted `index,cluster` CSV covering every instance.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth `index,label` CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Partial labels file used for clustering; its label values are the seen classes.
    #[arg(long)]
    pub seen: Option<PathBuf>,
    /// Seen classes given directly as ground-truth ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "seen")]
    pub seen_classes: Option<Vec<u32>>,
    /// Defaults to `unlabelled` with `--seen`, `all` otherwise.
    #[arg(long, value_enum)]
    pub eval_set: Option<EvalSet>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct PseudoArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    /// Hierarchy level (0 = singletons), clamped to the top.
    #[arg(long, default_value_t = snc_core::snc::DEFAULT_PSEUDO_LEVEL)]
    pub level: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct LossArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    /// JSON `{"indices": [...], "pseudo": [...]}`; without `pseudo` the
    /// hierarchy is built and `--level` supplies it.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long)]
    pub level: Option<usize>,
    #[arg(long, default_value_t = 0.07)]
    pub tau_s: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau_a: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau_u: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = snc_core::baselines::DEFAULT_KMEANS_ITERS)]
    pub iters: usize,
    /// Ground truth `index,label` CSV; adds accuracy on the unlabelled instances.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFileFormat {
    Binary,
    Csv,
}

#[derive(Args, Serialize)]
pub struct GenBlobsArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub seen: usize,
    /// Unlabelled instances per class.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Labelled instances per seen class.
    #[arg(long, default_value_t = 50)]
    pub labelled_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: FeatureFileFormat,
    /// Directory receiving features, labels.csv, truth.csv and blobs.json.
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return commands::report(&commands::CliError::Usage(e.render().to_string()));
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return commands::report(&commands::CliError::Usage("--threads must be >= 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            return commands::report(&commands::CliError::Usage(format!("thread pool: {e}")));
        }
    }
    let result = match &cli.command {
        Command::Cluster(a) => commands::cluster(a),
        Command::EstimateK(a) => commands::estimate(a),
        Command::Assign(a) => commands::assign(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pseudo(a) => commands::pseudo(a),
        Command::Loss(a) => commands::loss(a),
        Command::Bench(a) => commands::bench(a),
        Command::GenBlobs(a) => commands::gen_blobs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report(&e),
    }
}
