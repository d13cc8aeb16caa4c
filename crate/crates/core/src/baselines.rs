//! Reference clusterers: first-neighbor hierarchy, k-means and
//! semi-supervised k-means with pinned labelled instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{FeatureMatrix, GcdDataset};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, components_from_edges};
use crate::similarity::{gemm_abt, nearest_by_dot};
use crate::snc::{ChainConfig, Hierarchy, Partition};

pub const DEFAULT_KMEANS_ITERS: usize = 300;

/// Parameter-free first-neighbor hierarchy: every cluster links to its most
/// similar other cluster, and linked components form the next level.
pub fn finch(features: &FeatureMatrix) -> Result<Hierarchy> {
    if features.n() < 2 {
        return Err(Error::InvalidInput(format!(
            "clustering needs at least 2 instances, got {}",
            features.n()
        )));
    }
    let ds = GcdDataset::unlabelled_only(features.clone());
    let d = features.d();
    let mut levels = vec![Partition::singletons(&ds)];
    loop {
        let cur = levels.last().unwrap();
        if cur.len() < 2 {
            break;
        }
        let centroids = cur.centroid_matrix();
        let exclude: Vec<Option<usize>> = (0..cur.len()).map(Some).collect();
        let first: Vec<Option<usize>> = nearest_by_dot(&centroids, &centroids, d, &exclude)
            .into_iter()
            .map(|b| b.map(|(j, _)| j))
            .collect();
        let edges = build_adjacency(&first)?.edges();
        let comp = components_from_edges(cur.len(), &edges);
        let count = comp.iter().max().map_or(0, |m| m + 1);
        if count >= cur.len() {
            break;
        }
        let mut groups = vec![Vec::new(); count];
        for (c, &g) in comp.iter().enumerate() {
            groups[g].extend_from_slice(&cur.clusters[c].members);
        }
        let next = Partition::from_groups(&ds, cur.level + 1, groups);
        levels.push(next);
    }
    let steps = levels.len() - 1;
    Ok(Hierarchy {
        levels,
        config: ChainConfig::default(),
        lambda_trace: vec![Vec::new(); steps],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    /// Row-major `k × d`.
    pub centroids: Vec<f32>,
    /// Sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn kmeans(features: &FeatureMatrix, k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let n = features.n();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k must lie in 1..={n}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n).collect();
    let centroids = plus_plus_seed(features, &all, Vec::new(), k, &mut rng);
    Ok(lloyd(features, centroids, k, &vec![None; n], &all, iters))
}

/// k-means whose first `N_L` centroids start at the labelled class means and
/// keep their labelled instances for good.
pub fn semi_kmeans(ds: &GcdDataset, k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let n = ds.n();
    let classes = ds.num_classes();
    if k < classes {
        return Err(Error::Constraint(format!(
            "k = {k} is below the {classes} labelled classes"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k must lie in 1..={n}, got {k}")));
    }
    let free = ds.unlabelled_indices();
    if free.len() < k - classes {
        return Err(Error::InvalidInput(format!(
            "{} unlabelled instances cannot seed {} extra centroids",
            free.len(),
            k - classes
        )));
    }
    let f = ds.features();
    let d = f.d();
    let mut sums = vec![0f64; classes * d];
    let mut counts = vec![0usize; classes];
    for &i in ds.labelled_indices() {
        let c = ds.label(i).unwrap() as usize;
        counts[c] += 1;
        for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(f.row(i)) {
            *s += f64::from(v);
        }
    }
    let initial: Vec<f32> = sums
        .chunks(d.max(1))
        .zip(&counts)
        .flat_map(|(s, &cnt)| s.iter().map(move |v| (v / cnt as f64) as f32))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = plus_plus_seed(f, free, initial, k, &mut rng);
    let pinned: Vec<Option<usize>> = ds.labels().iter().map(|l| l.map(|c| c as usize)).collect();
    Ok(lloyd(f, centroids, k, &pinned, free, iters))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x - y).powi(2)).sum()
}

/// k-means++: extends `centroids` to `k` rows, drawing each new one from
/// `pool` with probability proportional to the squared distance to the
/// nearest existing centroid.
fn plus_plus_seed(
    f: &FeatureMatrix,
    pool: &[usize],
    mut centroids: Vec<f32>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let d = f.d();
    let mut have = centroids.len() / d;
    let mut nearest = vec![f64::INFINITY; pool.len()];
    let refresh = |nearest: &mut [f64], from: usize, to: usize, cents: &[f32]| {
        nearest.par_iter_mut().enumerate().for_each(|(p, best)| {
            for c in from..to {
                *best = best.min(sq_dist(f.row(pool[p]), &cents[c * d..(c + 1) * d]));
            }
        });
    };
    if have == 0 && k > 0 {
        let first = pool[rng.random_range(0..pool.len())];
        centroids.extend_from_slice(f.row(first));
        have = 1;
    }
    refresh(&mut nearest, 0, have, &centroids);
    while have < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (p, &w) in nearest.iter().enumerate() {
                if r < w {
                    pick = p;
                    break;
                }
                r -= w;
            }
            // guard against rounding landing on a zero-weight tail entry
            while nearest[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..pool.len())
        };
        centroids.extend_from_slice(f.row(pool[pick]));
        refresh(&mut nearest, have, have + 1, &centroids);
        have += 1;
    }
    centroids
}

const ASSIGN_BLOCK: usize = 64;

/// Nearest centroid per row (squared Euclidean, lowest index on ties) and
/// the squared distance to it.
fn assign_nearest(f: &FeatureMatrix, centroids: &[f32], k: usize) -> Vec<(usize, f64)> {
    let d = f.d();
    let c_norms: Vec<f32> = centroids.chunks(d).map(|c| c.iter().map(|v| v * v).sum()).collect();
    f.values()
        .par_chunks(ASSIGN_BLOCK * d)
        .flat_map_iter(|block| {
            let rows = block.len() / d;
            let mut dots = vec![0f32; rows * k];
            gemm_abt(block, centroids, d, &mut dots);
            (0..rows)
                .map(|r| {
                    let x = &block[r * d..(r + 1) * d];
                    let mut best = 0;
                    let mut best_v = f32::INFINITY;
                    for c in 0..k {
                        let v = c_norms[c] - 2.0 * dots[r * k + c];
                        if v < best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    (best, sq_dist(x, &centroids[best * d..(best + 1) * d]))
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn lloyd(
    f: &FeatureMatrix,
    mut centroids: Vec<f32>,
    k: usize,
    pinned: &[Option<usize>],
    free: &[usize],
    iters: usize,
) -> KMeansResult {
    let n = f.n();
    let d = f.d();
    let mut assignment: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < iters.max(1) {
        iterations += 1;
        let mut nearest = assign_nearest(f, &centroids, k);
        for i in 0..n {
            if let Some(c) = pinned[i] {
                nearest[i] = (c, sq_dist(f.row(i), &centroids[c * d..(c + 1) * d]));
            }
        }
        let next: Vec<usize> = nearest.iter().map(|x| x.0).collect();
        inertia.push(nearest.iter().map(|x| x.1).sum());
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;

        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(f.row(i)) {
                *s += f64::from(v);
            }
        }
        // empty clusters restart at the free instances farthest from their centroid
        let mut far = Vec::new();
        if counts.contains(&0) {
            far = free.to_vec();
            far.sort_by(|&a, &b| nearest[b].1.total_cmp(&nearest[a].1).then(a.cmp(&b)));
        }
        let mut far = far.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            } else if let Some(i) = far.next() {
                centroids[c * d..(c + 1) * d].copy_from_slice(f.row(i));
            }
        }
    }
    KMeansResult {
        assignment,
        centroids,
        inertia,
        iterations,
        converged,
    }
}
