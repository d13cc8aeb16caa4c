//! Assignment-based accuracy, purity and cosine silhouette.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

/// Optimal row-to-column assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// `cols[r]` is the column given to row `r`.
    pub cols: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect assignment on a square matrix given row-major.
///
/// Among all optimal permutations the lexicographically smallest one is
/// returned, so the result does not depend on how the solver explored ties.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::InvalidInput(format!(
            "assignment matrix must be square: {} entries for {n} rows",
            cost.len()
        )));
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "assignment matrix entry ({}, {}) is not finite",
            k / n,
            k % n
        )));
    }
    if n == 0 {
        return Ok(Assignment {
            cols: Vec::new(),
            cost: 0.0,
        });
    }
    let (row_pot, col_pot, matched) = solve_potentials(cost, n);
    let scale = cost.iter().fold(1f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<bool> = (0..n * n)
        .map(|k| (cost[k] - row_pot[k / n] - col_pot[k % n]).abs() <= tol)
        .collect();
    let cols = lexicographic_matching(&tight, n, matched);
    let total = cols.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
    Ok(Assignment { cols, cost: total })
}

/// Shortest-augmenting-path solver with dual potentials. Returns the row and
/// column potentials and an optimal row-to-column matching.
fn solve_potentials(cost: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based internally; index 0 is the virtual source
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Every perfect matching inside the tight-edge graph is optimal, and every
/// optimal one lies inside it. Rows are fixed in order to their smallest
/// column that still admits a perfect matching of the rest.
fn lexicographic_matching(tight: &[bool], n: usize, mut row_to_col: Vec<usize>) -> Vec<usize> {
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed_col = vec![false; n];
    for r in 0..n {
        for c in 0..row_to_col[r] {
            if fixed_col[c] || !tight[r * n + c] {
                continue;
            }
            // row r takes c; c's owner must reach r's old column through an
            // alternating path over unfixed rows and columns
            let target = row_to_col[r];
            let owner = col_to_row[c];
            let mut seen = vec![false; n];
            seen[c] = true;
            let mut path = Vec::new();
            if reroute(owner, target, tight, n, r, &fixed_col, &col_to_row, &mut seen, &mut path) {
                for &(row, col) in &path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[r] = c;
                col_to_row[c] = r;
                break;
            }
        }
        fixed_col[row_to_col[r]] = true;
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    target: usize,
    tight: &[bool],
    n: usize,
    skip_row: usize,
    fixed_col: &[bool],
    col_to_row: &[usize],
    seen: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..n {
        if seen[c] || fixed_col[c] || !tight[row * n + c] {
            continue;
        }
        seen[c] = true;
        path.push((row, c));
        if c == target {
            return true;
        }
        let next = col_to_row[c];
        if next != skip_row
            && reroute(next, target, tight, n, skip_row, fixed_col, col_to_row, seen, path)
        {
            return true;
        }
        path.pop();
    }
    false
}

/// Accuracy under the best one-to-one cluster-to-class mapping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccReport {
    pub acc_all: f64,
    /// Restricted to instances whose true class is seen; absent when there are none.
    pub acc_seen: Option<f64>,
    pub acc_unseen: Option<f64>,
    /// Predicted cluster id to class id. Clusters matched to padding are omitted.
    pub mapping: BTreeMap<usize, u32>,
}

impl AccReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("acc_all", self.acc_all)];
        if let Some(v) = self.acc_seen {
            out.push(("acc_seen", v));
        }
        if let Some(v) = self.acc_unseen {
            out.push(("acc_unseen", v));
        }
        out
    }
}

pub fn clustering_accuracy(
    pred: &[usize],
    truth: &[u32],
    eval_set: &[usize],
    seen_classes: &BTreeSet<u32>,
) -> Result<AccReport> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    if let Some(&i) = eval_set.iter().find(|&&i| i >= pred.len()) {
        return Err(Error::InvalidInput(format!(
            "evaluation index {i} is out of range 0..{}",
            pred.len()
        )));
    }
    let clusters: Vec<usize> = eval_set.iter().map(|&i| pred[i]).collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<u32> = eval_set.iter().map(|&i| truth[i]).collect::<BTreeSet<_>>().into_iter().collect();
    let m = clusters.len().max(classes.len());
    let mut profit = vec![0f64; m * m];
    for &i in eval_set {
        let r = clusters.binary_search(&pred[i]).unwrap();
        let c = classes.binary_search(&truth[i]).unwrap();
        profit[r * m + c] += 1.0;
    }
    let cost: Vec<f64> = profit.iter().map(|p| -p).collect();
    let a = hungarian(&cost, m)?;
    let mapping: BTreeMap<usize, u32> = clusters
        .iter()
        .enumerate()
        .filter(|&(r, _)| a.cols[r] < classes.len())
        .map(|(r, &cl)| (cl, classes[a.cols[r]]))
        .collect();
    let (mut hit, mut seen_hit, mut seen_n, mut unseen_hit, mut unseen_n) = (0, 0, 0, 0, 0);
    for &i in eval_set {
        let ok = mapping.get(&pred[i]) == Some(&truth[i]);
        hit += usize::from(ok);
        if seen_classes.contains(&truth[i]) {
            seen_n += 1;
            seen_hit += usize::from(ok);
        } else {
            unseen_n += 1;
            unseen_hit += usize::from(ok);
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(AccReport {
        acc_all: hit as f64 / eval_set.len() as f64,
        acc_seen: frac(seen_hit, seen_n),
        acc_unseen: frac(unseen_hit, unseen_n),
        mapping,
    })
}

/// Instance-weighted majority-class fraction. Zero for empty input.
pub fn purity(pred: &[usize], truth: &[u32]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *counts.entry((p, t)).or_default() += 1;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(p, _), &k) in &counts {
        let b = best.entry(p).or_default();
        *b = (*b).max(k);
    }
    best.values().sum::<usize>() as f64 / pred.len() as f64
}

/// Below this, both mean distances count as zero and the instance scores 0.
const SIL_ZERO: f64 = 1e-12;

/// Mean silhouette with cosine distance `1 − x·y`.
///
/// With `sample = Some((cap, seed))` and more than `cap` instances, a seeded
/// uniform subsample is scored, each against the full dataset.
pub fn silhouette(
    features: &FeatureMatrix,
    assignment: &[usize],
    sample: Option<(usize, u64)>,
) -> Result<f64> {
    let n = features.n();
    if assignment.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} cluster ids for {n} instances",
            assignment.len()
        )));
    }
    let k = assignment.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate(
            "silhouette needs at least two non-empty clusters".into(),
        ));
    }
    let scored: Vec<usize> = match sample {
        Some((cap, _)) if cap < 2 => {
            return Err(Error::InvalidInput(format!("silhouette sample cap must be at least 2, got {cap}")))
        }
        Some((cap, seed)) if cap < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let d = features.d();
    let rows: Vec<f64> = (0..n).flat_map(|i| unit_f64(features.row(i))).collect();
    let mut sums = vec![0f64; k * d];
    for (i, &a) in assignment.iter().enumerate() {
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(&rows[i * d..(i + 1) * d]) {
            *s += x;
        }
    }
    let occupied: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    let scores: Vec<f64> = scored
        .par_chunks(256)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|&i| {
                let own = assignment[i];
                if sizes[own] == 1 {
                    return 0.0;
                }
                let x = &rows[i * d..(i + 1) * d];
                let dot = |c: usize| -> f64 {
                    x.iter().zip(&sums[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum()
                };
                let self_dot: f64 = x.iter().map(|v| v * v).sum();
                let a = 1.0 - (dot(own) - self_dot) / (sizes[own] - 1) as f64;
                let b = occupied
                    .iter()
                    .filter(|&&c| c != own)
                    .map(|&c| 1.0 - dot(c) / sizes[c] as f64)
                    .fold(f64::INFINITY, f64::min);
                let (a, b) = (a.max(0.0), b.max(0.0));
                let denom = a.max(b);
                if denom <= SIL_ZERO {
                    0.0
                } else {
                    (b - a) / denom
                }
            }).collect::<Vec<_>>()
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn unit_f64(row: &[f32]) -> Vec<f64> {
    let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    let norm = if norm > 0.0 { norm } else { 1.0 };
    row.iter().map(|&v| f64::from(v) / norm).collect()
}

/// Writes `(metric, value)` rows as CSV with a header.
pub fn write_metric_csv<W: Write>(out: W, rows: &[(&str, f64)]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    for (name, value) in rows {
        w.write_record([name.to_string(), value.to_string()])?;
    }
    w.flush()
}
