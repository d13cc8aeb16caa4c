//! Class-number estimation and final label assignment.
//!
//! Estimation hides a validation slice of the labelled data, clusters, and
//! scores every hierarchy level by held-out accuracy times unlabelled
//! silhouette (each min-max scaled across the levels). The band around the
//! best level is then scanned one merge at a time with the same score.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_labelled, FeatureMatrix, GcdDataset, LabelledSplit};
use crate::error::{Error, Result};
use crate::merge::{find_start_level, one_to_one_merge};
use crate::metrics::{clustering_accuracy, silhouette};
use crate::snc::{run_snc, ChainConfig, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    /// Fraction of each labelled class kept labelled during estimation.
    pub ratio: f64,
    pub seed: u64,
    /// Silhouette subsample size; `None` scores every unlabelled instance.
    pub sil_cap: Option<usize>,
    /// Caps the upper end of the merge band at `multiplier × |chosen level|`.
    /// `None` keeps the full band.
    pub band_multiplier: Option<f64>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 0,
            sil_cap: Some(5000),
            band_multiplier: None,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidInput(format!(
                "split ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        if let Some(cap) = self.sil_cap {
            if cap < 2 {
                return Err(Error::InvalidInput(format!(
                    "silhouette cap must be at least 2, got {cap}"
                )));
            }
        }
        if let Some(m) = self.band_multiplier {
            if !(m >= 1.0 && m.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "band multiplier must be a finite value >= 1, got {m}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceScore {
    /// Accuracy on the hidden validation labels.
    pub acc_val: f64,
    /// Cosine silhouette over the unlabelled instances.
    pub sil_u: f64,
    /// Product of the two after min-max scaling within one scan.
    pub s_scaled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelScore {
    pub level: usize,
    pub num_clusters: usize,
    pub score: ReferenceScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanEntry {
    pub num_clusters: usize,
    pub score: ReferenceScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KEstimate {
    pub k: usize,
    pub chosen_level: usize,
    pub level_scores: Vec<LevelScore>,
    /// Upper and lower ends of the merge band.
    pub n_o: usize,
    pub n_e: usize,
    /// Level the merge scan started from.
    pub start_level: usize,
    pub scan: Vec<ScanEntry>,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

/// Inputs shared by every scoring call of one estimation run.
pub struct ScoringContext {
    truth: Vec<u32>,
    val: Vec<usize>,
    unlabelled: Vec<usize>,
    unlabelled_features: FeatureMatrix,
    sil_sample: Option<(usize, u64)>,
}

impl ScoringContext {
    pub fn new(ds: &GcdDataset, split: &LabelledSplit, cfg: &EstimateConfig) -> Result<Self> {
        if split.val.is_empty() {
            return Err(Error::InvalidInput(
                "the labelled split left no validation instances; use more labelled data or a smaller ratio".into(),
            ));
        }
        let unlabelled = ds.unlabelled_indices().to_vec();
        if unlabelled.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "estimation needs at least 2 unlabelled instances, got {}",
                unlabelled.len()
            )));
        }
        Ok(Self {
            truth: ds.labels().iter().map(|l| l.unwrap_or(0)).collect(),
            val: split.val.clone(),
            unlabelled_features: ds.features().select_rows(&unlabelled)?,
            unlabelled,
            sil_sample: cfg.sil_cap.map(|cap| (cap, cfg.seed)),
        })
    }
}

/// True when every unlabelled instance has exactly the same features.
fn unlabelled_coincident(ds: &GcdDataset) -> bool {
    let f = ds.features();
    let u = ds.unlabelled_indices();
    u.iter().all(|&i| f.row(i) == f.row(u[0]))
}

/// Raw held-out accuracy and unlabelled silhouette of one partition.
pub fn reference_components(p: &Partition, ctx: &ScoringContext) -> Result<ReferenceScore> {
    if p.len() < 2 {
        return Err(Error::Degenerate(
            "a single-cluster partition has no silhouette".into(),
        ));
    }
    let acc = clustering_accuracy(&p.assignment, &ctx.truth, &ctx.val, &BTreeSet::new())?;
    let sub: Vec<usize> = ctx.unlabelled.iter().map(|&i| p.assignment[i]).collect();
    let sil = silhouette(&ctx.unlabelled_features, &sub, ctx.sil_sample)?;
    Ok(ReferenceScore {
        acc_val: acc.acc_all,
        sil_u: sil,
        s_scaled: None,
    })
}

/// Maps a series onto `[0, 1]`. A constant series maps to all ones.
pub fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // also catches an empty series, where hi < lo
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Fills `s_scaled` and returns the index of the best score. `prefer_later`
/// breaks ties toward the later entry.
fn scale_and_pick(scores: &mut [ReferenceScore], prefer_later: bool) -> usize {
    let acc = min_max_scale(&scores.iter().map(|s| s.acc_val).collect::<Vec<_>>());
    let sil = min_max_scale(&scores.iter().map(|s| s.sil_u).collect::<Vec<_>>());
    let mut best = 0;
    for (i, s) in scores.iter_mut().enumerate() {
        s.s_scaled = Some(acc[i] * sil[i]);
    }
    for i in 1..scores.len() {
        let (cur, top) = (scores[i].s_scaled.unwrap(), scores[best].s_scaled.unwrap());
        if cur > top || (prefer_later && cur == top) {
            best = i;
        }
    }
    best
}

/// Scores a partition unless its unlabelled part falls into a single cluster.
fn score_if_defined(p: &Partition, ctx: &ScoringContext) -> Result<Option<ReferenceScore>> {
    let distinct: BTreeSet<usize> = ctx.unlabelled.iter().map(|&i| p.assignment[i]).collect();
    if p.len() < 2 || distinct.len() < 2 {
        return Ok(None);
    }
    reference_components(p, ctx).map(Some)
}

pub fn estimate_k(ds: &GcdDataset, cfg: &EstimateConfig, chain: &ChainConfig) -> Result<KEstimate> {
    let start = Instant::now();
    cfg.validate()?;
    if ds.labelled_indices().is_empty() || ds.unlabelled_indices().is_empty() {
        return Err(Error::InvalidInput(
            "estimation needs both labelled and unlabelled instances".into(),
        ));
    }
    if unlabelled_coincident(ds) {
        return Err(Error::Degenerate(
            "all unlabelled instances share identical features; silhouette cannot rank levels".into(),
        ));
    }
    let split = split_labelled(ds, cfg.ratio, cfg.seed)?;
    let ctx = ScoringContext::new(ds, &split, cfg)?;
    let masked = ds.with_hidden_labels(&split.val)?;
    let h = run_snc(&masked, chain)?;
    if h.levels.len() < 2 {
        return Err(Error::Degenerate(
            "the hierarchy has a single level; nothing to choose from".into(),
        ));
    }

    let scored: Vec<Option<ReferenceScore>> = h
        .levels
        .par_iter()
        .map(|p| score_if_defined(p, &ctx))
        .collect::<Result<_>>()?;
    let mut level_scores: Vec<LevelScore> = scored
        .into_iter()
        .enumerate()
        .filter_map(|(level, s)| {
            s.map(|score| LevelScore {
                level,
                num_clusters: h.levels[level].len(),
                score,
            })
        })
        .collect();
    if level_scores.is_empty() {
        return Err(Error::Degenerate("no hierarchy level could be scored".into()));
    }
    let mut raw: Vec<ReferenceScore> = level_scores.iter().map(|l| l.score).collect();
    // levels come in decreasing cluster count, so later means fewer clusters
    let best = scale_and_pick(&mut raw, true);
    for (l, s) in level_scores.iter_mut().zip(raw) {
        l.score = s;
    }
    let chosen = level_scores[best].level;

    let counts = h.counts();
    let n = ds.n();
    let chosen_count = counts[chosen];
    let mut n_o = if chosen == 0 { n - 1 } else { counts[chosen - 1] }.min(n - 1);
    if let Some(m) = cfg.band_multiplier {
        let cap = ((m * chosen_count as f64).ceil() as usize).max(chosen_count);
        n_o = n_o.min(cap);
    }
    let floor = masked.num_classes().max(1);
    let n_e = counts.get(chosen + 1).copied().unwrap_or(floor).max(floor).min(n_o);

    let start_level = find_start_level(&h, n_o)?;
    let from = &h.levels[start_level];
    let mut scan = Vec::new();
    let mut failure = None;
    {
        let mut observe = |p: &Partition| {
            if failure.is_some() || p.len() > n_o {
                return;
            }
            match score_if_defined(p, &ctx) {
                Ok(Some(score)) => scan.push(ScanEntry {
                    num_clusters: p.len(),
                    score,
                }),
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        };
        one_to_one_merge(from, &masked, n_e, Some(&mut observe))?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if scan.is_empty() {
        return Err(Error::Degenerate(format!(
            "no partition in the merge band [{n_e}, {n_o}] could be scored"
        )));
    }
    let mut raw: Vec<ReferenceScore> = scan.iter().map(|s| s.score).collect();
    // the scan runs from many clusters to few, so later means smaller count
    let pick = scale_and_pick(&mut raw, true);
    for (s, r) in scan.iter_mut().zip(raw) {
        s.score = r;
    }
    Ok(KEstimate {
        k: scan[pick].num_clusters,
        chosen_level: chosen,
        level_scores,
        n_o,
        n_e,
        start_level,
        scan,
        train_size: split.train.len(),
        val_size: split.val.len(),
        runtime_ms: Some(start.elapsed().as_secs_f64() * 1e3),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAssignment {
    /// Cluster id per instance, `0..k`.
    pub assignment: Vec<usize>,
    pub start_level: usize,
    pub start_count: usize,
    pub merges: usize,
}

/// Clusters the full dataset and brings it to exactly `k` clusters: an
/// exact-count level is used as is, otherwise the level with the smallest
/// count above `k` is merged down.
pub fn assign_labels(ds: &GcdDataset, k: usize, chain: &ChainConfig) -> Result<LabelAssignment> {
    let n = ds.n();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "class number must lie in 1..{n}, got {k}"
        )));
    }
    if k < ds.num_classes() {
        return Err(Error::Constraint(format!(
            "class number {k} is below the {} labelled classes",
            ds.num_classes()
        )));
    }
    let h = run_snc(ds, chain)?;
    let counts = h.counts();
    if let Some(level) = counts.iter().position(|&c| c == k) {
        return Ok(LabelAssignment {
            assignment: h.levels[level].assignment.clone(),
            start_level: level,
            start_count: k,
            merges: 0,
        });
    }
    let level = (0..counts.len())
        .filter(|&t| counts[t] > k)
        .min_by_key(|&t| counts[t])
        .expect("level 0 has n > k clusters");
    let (merged, trace) = one_to_one_merge(&h.levels[level], ds, k, None)?;
    Ok(LabelAssignment {
        assignment: merged.assignment,
        start_level: level,
        start_count: counts[level],
        merges: trace.steps.len(),
    })
}
