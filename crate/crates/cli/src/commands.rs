use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use snc_core::baselines::{finch, kmeans, semi_kmeans, DEFAULT_KMEANS_ITERS};
use snc_core::dataset::{
    l2_normalize, load_features, load_labels, read_index_csv, write_features, write_index_csv,
    write_index_csv_to, Labels,
};
use snc_core::estimate::{assign_labels, estimate_k, EstimateConfig, KEstimate};
use snc_core::loss::{build_positive_sets, refresh_pseudo, total_loss, unified_loss, Batch, LossConfig, LossTerm};
use snc_core::metrics::{clustering_accuracy, purity, write_metric_csv, AccReport};
use snc_core::snc::{run_snc, HierarchyReport};
use snc_core::synth::{generate_blobs, BlobSpec};
use snc_core::{ChainConfig, Error, FeatureFormat, GcdDataset};

use crate::{
    alloc, AssignAlgorithm, AssignArgs, BenchArgs, ChainArgs, ClusterAlgorithm, ClusterArgs,
    EstimateArgs, EvalArgs, EvalSet, FeatureFileFormat, GenBlobsArgs, InputArgs, LossArgs,
    PseudoArgs, ReportFormat,
};

#[derive(Debug)]
pub enum CliError {
    /// Inconsistent or malformed flags.
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Prints the error JSON on stderr and maps the error to its exit code.
pub fn report(e: &CliError) -> ExitCode {
    let (kind, message, code) = match e {
        CliError::Usage(m) => ("usage", m.trim_end().to_string(), 2),
        CliError::Core(e @ Error::Constraint(_)) => (e.kind(), e.to_string(), 4),
        CliError::Core(e) => (e.kind(), e.to_string(), 3),
    };
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| io_error(path, e)),
        None => std::io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

#[derive(Serialize)]
struct Tool {
    name: &'static str,
    version: &'static str,
}

/// Every JSON artifact: tool id, resolved configuration, then the result.
#[derive(Serialize)]
struct Document<'a, C, R> {
    tool: Tool,
    config: &'a C,
    result: R,
}

fn json_document<C: Serialize, R: Serialize>(config: &C, result: R) -> CliResult<Vec<u8>> {
    let doc = Document {
        tool: Tool {
            name: "snc",
            version: env!("CARGO_PKG_VERSION"),
        },
        config,
        result,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)
        .map_err(|e| CliError::Core(Error::InvalidInput(format!("serializing output: {e}"))))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn chain_config(args: &ChainArgs) -> ChainConfig {
    ChainConfig {
        rule: args.chain,
        max_levels: args.max_levels,
    }
}

/// Loads and normalizes the features and attaches the partial labels, if any.
fn load_dataset(input: &InputArgs) -> CliResult<(GcdDataset, Option<Labels>)> {
    let raw = load_features(&input.features, FeatureFormat::from_path(&input.features))?;
    let features = l2_normalize(&raw)?;
    let n = features.n();
    let labels = input.labels.as_ref().map(|p| load_labels(p, n)).transpose()?;
    let ids = labels.as_ref().map_or_else(|| vec![None; n], |l| l.ids.clone());
    Ok((GcdDataset::new(features, ids)?, labels))
}

fn require_labels(input: &InputArgs, command: &str) -> CliResult {
    if input.labels.is_none() {
        return Err(CliError::Usage(format!("{command} needs --labels")));
    }
    Ok(())
}

/// Ground-truth ids per instance; `None` where the file has no value.
fn load_truth(path: &Path, n: usize) -> CliResult<Vec<Option<u32>>> {
    let mut truth = vec![None; n];
    for (i, v) in read_index_csv(path, n)? {
        if let Some(v) = v {
            let id = u32::try_from(v).map_err(|_| {
                Error::InvalidInput(format!("{}: label {v} of instance {i} exceeds u32", path.display()))
            })?;
            truth[i] = Some(id);
        }
    }
    Ok(truth)
}

fn complete_truth(truth: Vec<Option<u32>>, path: &Path) -> CliResult<Vec<u32>> {
    truth
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.ok_or_else(|| {
                CliError::Core(Error::InvalidInput(format!(
                    "{}: no ground truth for instance {i}",
                    path.display()
                )))
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ClusterResult {
    counts: Vec<usize>,
    /// Original label value of each contiguous class id.
    #[serde(skip_serializing_if = "Option::is_none")]
    label_values: Option<Vec<u64>>,
    hierarchy: HierarchyReport,
}

pub fn cluster(args: &ClusterArgs) -> CliResult {
    if args.algorithm == ClusterAlgorithm::Finch && args.input.labels.is_some() {
        return Err(CliError::Usage("finch is label-blind; drop --labels or use --algorithm snc".into()));
    }
    let (ds, labels) = load_dataset(&args.input)?;
    let truth = args
        .truth
        .as_ref()
        .map(|p| load_truth(p, ds.n()).and_then(|t| complete_truth(t, p)))
        .transpose()?;
    let h = match args.algorithm {
        ClusterAlgorithm::Snc => run_snc(&ds, &chain_config(&args.chain))?,
        ClusterAlgorithm::Finch => finch(ds.features())?,
    };
    let mut hierarchy = h.report();
    if let Some(truth) = &truth {
        for (level, p) in hierarchy.levels.iter_mut().zip(&h.levels) {
            level.purity = Some(purity(&p.assignment, truth));
        }
    }
    let result = ClusterResult {
        counts: h.counts(),
        label_values: labels.map(|l| l.original),
        hierarchy,
    };
    emit(args.out.as_deref(), &json_document(args, result)?)
}

pub fn estimate(args: &EstimateArgs) -> CliResult {
    require_labels(&args.input, "estimate-k")?;
    let cfg = EstimateConfig {
        ratio: args.ratio,
        seed: args.seed,
        sil_cap: (!args.no_sil_cap).then_some(args.sil_cap),
        band_multiplier: args.band_multiplier,
    };
    cfg.validate()?;
    let (ds, _) = load_dataset(&args.input)?;
    let mut est: KEstimate = estimate_k(&ds, &cfg, &chain_config(&args.chain))?;
    if !args.timing {
        est.runtime_ms = None;
    }
    emit(args.out.as_deref(), &json_document(args, est)?)
}

pub fn assign(args: &AssignArgs) -> CliResult {
    match args.algorithm {
        AssignAlgorithm::Snc if args.seed.is_some() || args.iters.is_some() => {
            return Err(CliError::Usage(
                "--seed and --iters only apply to the k-means algorithms".into(),
            ));
        }
        AssignAlgorithm::Kmeans if args.input.labels.is_some() => {
            return Err(CliError::Usage(
                "kmeans is label-blind; drop --labels or use --algorithm semi-kmeans".into(),
            ));
        }
        AssignAlgorithm::SemiKmeans => require_labels(&args.input, "semi-kmeans")?,
        _ => {}
    }
    let (ds, _) = load_dataset(&args.input)?;
    let seed = args.seed.unwrap_or(0);
    let iters = args.iters.unwrap_or(DEFAULT_KMEANS_ITERS);
    let assignment = match args.algorithm {
        AssignAlgorithm::Snc => assign_labels(&ds, args.k, &chain_config(&args.chain))?.assignment,
        AssignAlgorithm::Kmeans => kmeans(ds.features(), args.k, seed, iters)?.assignment,
        AssignAlgorithm::SemiKmeans => semi_kmeans(&ds, args.k, seed, iters)?.assignment,
    };
    write_assignment(args.out.as_deref(), &assignment)
}

fn write_assignment(out: Option<&Path>, assignment: &[usize]) -> CliResult {
    let values: Vec<Option<usize>> = assignment.iter().copied().map(Some).collect();
    let mut bytes = Vec::new();
    write_index_csv_to(&mut bytes, "cluster", &values).map_err(|e| io_error(Path::new("<buffer>"), e))?;
    emit(out, &bytes)
}

#[derive(Serialize)]
struct EvalResult {
    eval_size: usize,
    #[serde(flatten)]
    report: AccReport,
}

/// Reads a prediction CSV that must cover `0..n` exactly once.
fn load_predictions(path: &Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let bound = text.lines().count();
    let rows = read_index_csv(path, bound)?;
    let n = rows.len();
    let mut pred = vec![0usize; n];
    for (i, v) in rows {
        if i >= n {
            return Err(Error::InvalidInput(format!(
                "{}: predictions must cover indices 0..{n}, found {i}",
                path.display()
            ))
            .into());
        }
        let v = v.ok_or_else(|| {
            Error::InvalidInput(format!("{}: no prediction for instance {i}", path.display()))
        })?;
        pred[i] = v as usize;
    }
    Ok(pred)
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let eval_set = match (args.eval_set, &args.seen) {
        (Some(EvalSet::Unlabelled), None) => {
            return Err(CliError::Usage("--eval-set unlabelled needs --seen".into()));
        }
        (Some(s), _) => s,
        (None, Some(_)) => EvalSet::Unlabelled,
        (None, None) => EvalSet::All,
    };
    let pred = load_predictions(&args.pred)?;
    let n = pred.len();
    let truth = load_truth(&args.truth, n)?;
    let mut seen = BTreeSet::new();
    let mut unlabelled: Vec<usize> = (0..n).collect();
    if let Some(path) = &args.seen {
        let partial = load_truth(path, n)?;
        seen.extend(partial.iter().flatten().copied());
        unlabelled.retain(|&i| partial[i].is_none());
    }
    if let Some(classes) = &args.seen_classes {
        seen.extend(classes.iter().copied());
    }
    let indices = match eval_set {
        EvalSet::All => (0..n).collect(),
        EvalSet::Unlabelled => unlabelled,
    };
    if let Some(&i) = indices.iter().find(|&&i| truth[i].is_none()) {
        return Err(Error::InvalidInput(format!(
            "{}: no ground truth for evaluated instance {i}",
            args.truth.display()
        ))
        .into());
    }
    // instances outside the evaluation set never reach the matching
    let truth: Vec<u32> = truth.into_iter().map(|t| t.unwrap_or(0)).collect();
    let report = clustering_accuracy(&pred, &truth, &indices, &seen)?;
    let resolved = EvalArgs {
        eval_set: Some(eval_set),
        ..args.clone()
    };
    let bytes = match args.format {
        ReportFormat::Json => json_document(
            &resolved,
            EvalResult {
                eval_size: indices.len(),
                report,
            },
        )?,
        ReportFormat::Csv => {
            let mut bytes = Vec::new();
            write_metric_csv(&mut bytes, &report.rows()).map_err(|e| io_error(Path::new("<buffer>"), e))?;
            bytes
        }
    };
    emit(args.out.as_deref(), &bytes)
}

pub fn pseudo(args: &PseudoArgs) -> CliResult {
    let (ds, _) = load_dataset(&args.input)?;
    let pseudo = refresh_pseudo(&ds, &chain_config(&args.chain), args.level)?;
    if pseudo.low_overclustering {
        let warning = serde_json::json!({
            "warning": format!(
                "level {} has {} clusters, fewer than twice the {} labelled classes",
                pseudo.level,
                pseudo.num_clusters,
                ds.num_classes()
            )
        });
        eprintln!("{warning}");
    }
    write_assignment(args.out.as_deref(), &pseudo.assignment)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchSpec {
    indices: Vec<usize>,
    #[serde(default)]
    pseudo: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct LossResult {
    batch_size: usize,
    /// Level the pseudo labels came from; absent when the batch file supplied them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pseudo_level: Option<usize>,
    all_data: LossTerm,
    supervised: LossTerm,
    total: f64,
    unified: LossTerm,
}

pub fn loss(args: &LossArgs) -> CliResult {
    let text = fs::read_to_string(&args.batch).map_err(|e| io_error(&args.batch, e))?;
    let spec: BatchSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.batch.clone(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if spec.pseudo.is_some() && args.level.is_some() {
        return Err(CliError::Usage(
            "the batch file already supplies pseudo labels; drop --level".into(),
        ));
    }
    let cfg = LossConfig {
        tau_s: args.tau_s,
        tau_a: args.tau_a,
        tau_u: args.tau_u,
    };
    cfg.validate()?;
    let (ds, _) = load_dataset(&args.input)?;
    if let Some(&i) = spec.indices.iter().find(|&&i| i >= ds.n()) {
        return Err(Error::InvalidInput(format!("batch index {i} is out of range 0..{}", ds.n())).into());
    }
    let (batch, pseudo_level) = match spec.pseudo {
        Some(pseudo) => {
            let embeddings = ds.features().select_rows(&spec.indices)?;
            let labels = spec.indices.iter().map(|&i| ds.label(i)).collect();
            (Batch::new(spec.indices, embeddings, labels, pseudo)?, None)
        }
        None => {
            let level = args.level.unwrap_or(snc_core::snc::DEFAULT_PSEUDO_LEVEL);
            let pseudo = refresh_pseudo(&ds, &chain_config(&args.chain), level)?;
            (Batch::from_dataset(&ds, spec.indices, &pseudo.assignment)?, Some(pseudo.level))
        }
    };
    let sets = build_positive_sets(&batch);
    let total = total_loss(&batch, &sets, &cfg)?;
    let unified = unified_loss(&batch, &sets, &cfg)?;
    let result = LossResult {
        batch_size: batch.len(),
        pseudo_level,
        all_data: total.all_data,
        supervised: total.supervised,
        total: total.total,
        unified,
    };
    emit(args.out.as_deref(), &json_document(args, result)?)
}

#[derive(Serialize)]
struct BenchSncResult {
    start_level: usize,
    start_count: usize,
    merges: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<AccReport>,
}

#[derive(Serialize)]
struct BenchKMeansResult {
    iterations: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<AccReport>,
}

#[derive(Serialize)]
struct Measurement {
    wall_ms: f64,
    /// Peak heap growth over the live bytes at the start of the run.
    peak_heap_bytes: usize,
}

#[derive(Serialize)]
struct Measurements {
    snc: Measurement,
    semi_kmeans: Measurement,
    /// Semi-kmeans wall time over SNC wall time.
    speedup: f64,
}

#[derive(Serialize)]
struct BenchResult {
    snc: BenchSncResult,
    semi_kmeans: BenchKMeansResult,
    /// Wall-clock and heap figures; the only part of any output that varies between runs.
    measurements: Measurements,
}

fn measure<T>(f: impl FnOnce() -> T) -> (T, Measurement) {
    let base = alloc::reset_peak();
    let start = Instant::now();
    let out = f();
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    (
        out,
        Measurement {
            wall_ms,
            peak_heap_bytes: alloc::peak().saturating_sub(base),
        },
    )
}

pub fn bench(args: &BenchArgs) -> CliResult {
    require_labels(&args.input, "bench")?;
    let (ds, _) = load_dataset(&args.input)?;
    let truth = args
        .truth
        .as_ref()
        .map(|p| load_truth(p, ds.n()).and_then(|t| complete_truth(t, p)))
        .transpose()?;
    let (snc, snc_cost) = measure(|| assign_labels(&ds, args.k, &chain_config(&args.chain)));
    let snc = snc?;
    let (km, km_cost) = measure(|| semi_kmeans(&ds, args.k, args.seed, args.iters));
    let km = km?;

    let score = |pred: &[usize]| -> CliResult<Option<AccReport>> {
        let Some(truth) = &truth else { return Ok(None) };
        let seen: BTreeSet<u32> = ds.labelled_indices().iter().map(|&i| truth[i]).collect();
        Ok(Some(clustering_accuracy(pred, truth, ds.unlabelled_indices(), &seen)?))
    };
    let result = BenchResult {
        snc: BenchSncResult {
            start_level: snc.start_level,
            start_count: snc.start_count,
            merges: snc.merges,
            accuracy: score(&snc.assignment)?,
        },
        semi_kmeans: BenchKMeansResult {
            iterations: km.iterations,
            converged: km.converged,
            accuracy: score(&km.assignment)?,
        },
        measurements: Measurements {
            speedup: km_cost.wall_ms / snc_cost.wall_ms.max(1e-9),
            snc: snc_cost,
            semi_kmeans: km_cost,
        },
    };
    emit(args.out.as_deref(), &json_document(args, result)?)
}

#[derive(Serialize)]
struct BlobFiles {
    features: PathBuf,
    labels: PathBuf,
    truth: PathBuf,
}

#[derive(Serialize)]
struct BlobsResult {
    n: usize,
    labelled: usize,
    /// Smallest center distance over sigma.
    separation: f64,
    files: BlobFiles,
}

pub fn gen_blobs(args: &GenBlobsArgs) -> CliResult {
    let spec = BlobSpec {
        classes: args.classes,
        seen: args.seen,
        unlabelled_per_class: args.per_class,
        labelled_per_seen_class: args.labelled_per_class,
        dim: args.dim,
        sigma: args.sigma,
        seed: args.seed,
    };
    let blobs = generate_blobs(&spec)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let files = BlobFiles {
        features: PathBuf::from(match args.format {
            FeatureFileFormat::Binary => "features.bin",
            FeatureFileFormat::Csv => "features.csv",
        }),
        labels: PathBuf::from("labels.csv"),
        truth: PathBuf::from("truth.csv"),
    };
    let format = match args.format {
        FeatureFileFormat::Binary => FeatureFormat::Binary,
        FeatureFileFormat::Csv => FeatureFormat::Csv,
    };
    write_features(dir.join(&files.features), blobs.dataset.features(), format)?;
    write_index_csv(dir.join(&files.labels), "label", blobs.dataset.labels())?;
    let truth: Vec<Option<u32>> = blobs.truth.iter().copied().map(Some).collect();
    write_index_csv(dir.join(&files.truth), "label", &truth)?;
    let result = BlobsResult {
        n: blobs.dataset.n(),
        labelled: blobs.dataset.labelled_indices().len(),
        separation: blobs.separation,
        files,
    };
    let path = dir.join("blobs.json");
    emit(Some(&path), &json_document(args, result)?)
}
