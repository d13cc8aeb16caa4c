//! Constrained one-to-one merging.
//!
//! Starting from one hierarchy level, the two most similar clusters are merged
//! until a target count is reached. Two clusters that both carry a label may
//! only merge when the labels agree.

use serde::Serialize;

use crate::dataset::GcdDataset;
use crate::error::{Error, Result};
use crate::similarity::dot_f64;
use crate::snc::{cluster_label, normalize_sum, Cluster, Hierarchy, Partition};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeStep {
    /// Slots of the merged clusters in the starting partition (`a < b`); the
    /// result lives on in slot `a`.
    pub pair: (usize, usize),
    pub similarity: f64,
    /// Cluster count after this step.
    pub count: usize,
    pub merged_centroid: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MergeTrace {
    pub start_count: usize,
    pub target: usize,
    pub steps: Vec<MergeStep>,
}

/// Level `t` with `|Γ^t| > n_o ≥ |Γ^{t+1}|`, or the top level when even that
/// one has more than `n_o` clusters.
pub fn find_start_level(h: &Hierarchy, n_o: usize) -> Result<usize> {
    let counts = h.counts();
    let n = counts[0];
    if n_o >= n {
        return Err(Error::InvalidInput(format!(
            "merge upper bound {n_o} must be below the instance count {n}"
        )));
    }
    Ok((0..counts.len())
        .find(|&t| counts[t] > n_o && counts.get(t + 1).is_none_or(|&next| next <= n_o))
        .unwrap_or(counts.len() - 1))
}

struct MergeState {
    active: Vec<bool>,
    members: Vec<Vec<usize>>,
    sums: Vec<Vec<f64>>,
    centroids: Vec<Vec<f32>>,
    labels: Vec<Option<u32>>,
    sim: Vec<f64>,
    size: usize,
    /// Best allowed partner `j > i` per row, lowest `j` on ties.
    best: Vec<Option<(usize, f64)>>,
}

impl MergeState {
    fn new(p: &Partition, ds: &GcdDataset) -> Self {
        let size = p.len();
        let f = ds.features();
        let sums = p
            .clusters
            .iter()
            .map(|c| {
                let mut s = vec![0f64; f.d()];
                for &i in &c.members {
                    for (acc, &v) in s.iter_mut().zip(f.row(i)) {
                        *acc += f64::from(v);
                    }
                }
                s
            })
            .collect();
        let centroids: Vec<Vec<f32>> = p.clusters.iter().map(|c| c.centroid.clone()).collect();
        let mut sim = vec![0f64; size * size];
        for i in 0..size {
            for j in i + 1..size {
                let s = dot_f64(&centroids[i], &centroids[j]);
                sim[i * size + j] = s;
                sim[j * size + i] = s;
            }
        }
        let mut state = Self {
            active: vec![true; size],
            members: p.clusters.iter().map(|c| c.members.clone()).collect(),
            sums,
            centroids,
            labels: p.clusters.iter().map(|c| c.label).collect(),
            sim,
            size,
            best: vec![None; size],
        };
        for i in 0..size {
            state.refresh_row(i);
        }
        state
    }

    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        match (self.labels[i], self.labels[j]) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }

    fn refresh_row(&mut self, i: usize) {
        let mut best: Option<(usize, f64)> = None;
        for j in i + 1..self.size {
            if !self.active[j] || !self.allowed(i, j) {
                continue;
            }
            let s = self.sim[i * self.size + j];
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        self.best[i] = best;
    }

    fn best_pair(&self) -> Option<(usize, usize, f64)> {
        let mut out: Option<(usize, usize, f64)> = None;
        for i in 0..self.size {
            if !self.active[i] {
                continue;
            }
            if let Some((j, s)) = self.best[i] {
                if out.is_none_or(|(_, _, b)| s > b) {
                    out = Some((i, j, s));
                }
            }
        }
        out
    }

    fn merge(&mut self, a: usize, b: usize, ds: &GcdDataset) {
        debug_assert!(a < b);
        let n = self.size;
        self.active[b] = false;
        let moved = std::mem::take(&mut self.members[b]);
        let mut merged = std::mem::take(&mut self.members[a]);
        merged.extend(moved);
        merged.sort_unstable();
        self.labels[a] = cluster_label(&merged, ds);
        self.members[a] = merged;
        let sum_b = std::mem::take(&mut self.sums[b]);
        for (x, y) in self.sums[a].iter_mut().zip(&sum_b) {
            *x += y;
        }
        if let Some(c) = normalize_sum(&self.sums[a]) {
            self.centroids[a] = c;
        }
        for j in 0..n {
            if self.active[j] && j != a {
                let s = dot_f64(&self.centroids[a], &self.centroids[j]);
                self.sim[a * n + j] = s;
                self.sim[j * n + a] = s;
            }
        }
        for i in 0..b {
            if !self.active[i] || i == a {
                continue;
            }
            match self.best[i] {
                Some((j, _)) if j == a || j == b => self.refresh_row(i),
                current if i < a && self.allowed(i, a) => {
                    let s = self.sim[i * n + a];
                    if current.is_none_or(|(j, v)| s > v || (s == v && a < j)) {
                        self.best[i] = Some((a, s));
                    }
                }
                _ => {}
            }
        }
        self.refresh_row(a);
    }

    fn partition(&self, level: usize, n: usize) -> Partition {
        let mut clusters = Vec::new();
        let mut assignment = vec![0; n];
        for c in (0..self.size).filter(|&c| self.active[c]) {
            for &i in &self.members[c] {
                assignment[i] = clusters.len();
            }
            clusters.push(Cluster {
                members: self.members[c].clone(),
                centroid: self.centroids[c].clone(),
                label: self.labels[c],
            });
        }
        Partition {
            level,
            clusters,
            assignment,
        }
    }
}

/// Merges the closest allowed pair until `n_e` clusters remain. `observer`
/// sees the partition after every merge.
pub fn one_to_one_merge(
    p: &Partition,
    ds: &GcdDataset,
    n_e: usize,
    mut observer: Option<&mut dyn FnMut(&Partition)>,
) -> Result<(Partition, MergeTrace)> {
    if n_e > p.len() {
        return Err(Error::InvalidInput(format!(
            "target {n_e} exceeds the current cluster count {}",
            p.len()
        )));
    }
    let floor = p.distinct_labels().max(1);
    if n_e < floor {
        return Err(Error::Constraint(format!(
            "cannot merge below {floor} clusters: that many distinct labelled classes are present, got target {n_e}"
        )));
    }
    let mut trace = MergeTrace {
        start_count: p.len(),
        target: n_e,
        steps: Vec::with_capacity(p.len() - n_e),
    };
    if n_e == p.len() {
        return Ok((p.clone(), trace));
    }
    let mut state = MergeState::new(p, ds);
    let mut count = p.len();
    while count > n_e {
        let (a, b, s) = state
            .best_pair()
            .expect("an allowed pair exists while count exceeds the label floor");
        state.merge(a, b, ds);
        count -= 1;
        trace.steps.push(MergeStep {
            pair: (a, b),
            similarity: s,
            count,
            merged_centroid: state.centroids[a].clone(),
        });
        if let Some(obs) = observer.as_deref_mut() {
            obs(&state.partition(p.level, ds.n()));
        }
    }
    Ok((state.partition(p.level, ds.n()), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureMatrix;
    use crate::snc::{run_snc, ChainConfig};

    fn unit2(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    fn singletons(points: &[Vec<f32>], labels: Vec<Option<u32>>) -> (GcdDataset, Partition) {
        let ds = GcdDataset::new(FeatureMatrix::from_rows(points).unwrap(), labels).unwrap();
        let p = Partition::singletons(&ds);
        (ds, p)
    }

    #[test]
    fn identity_when_target_is_current_count() {
        let (ds, p) = singletons(&[unit2(0.0), unit2(40.0)], vec![None, None]);
        let (q, trace) = one_to_one_merge(&p, &ds, 2, None).unwrap();
        assert_eq!(q, p);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn merges_closest_pairs_first() {
        let pts = [unit2(0.0), unit2(10.0), unit2(90.0), unit2(95.0)];
        let (ds, p) = singletons(&pts, vec![None; 4]);
        let (q, trace) = one_to_one_merge(&p, &ds, 2, None).unwrap();
        let pairs: Vec<_> = trace.steps.iter().map(|s| s.pair).collect();
        assert_eq!(pairs, vec![(2, 3), (0, 1)]);
        assert_eq!(q.clusters[0].members, vec![0, 1]);
        assert_eq!(q.clusters[1].members, vec![2, 3]);
        assert_eq!(trace.steps.iter().map(|s| s.count).collect::<Vec<_>>(), vec![3, 2]);
    }

    #[test]
    fn different_labels_never_merge() {
        let pts = [unit2(0.0), unit2(5.0), unit2(90.0)];
        let (ds, p) = singletons(&pts, vec![Some(0), Some(1), None]);
        let (q, trace) = one_to_one_merge(&p, &ds, 2, None).unwrap();
        assert_eq!(trace.steps[0].pair, (1, 2));
        assert_eq!(q.clusters[1].members, vec![1, 2]);
        assert_eq!(q.clusters[1].label, Some(1));
    }

    #[test]
    fn floor_and_range_errors() {
        let pts = [unit2(0.0), unit2(5.0), unit2(90.0)];
        let (ds, p) = singletons(&pts, vec![Some(0), Some(1), None]);
        assert!(matches!(one_to_one_merge(&p, &ds, 1, None), Err(Error::Constraint(_))));
        assert!(one_to_one_merge(&p, &ds, 4, None).is_err());
    }

    #[test]
    fn observer_sees_every_step() {
        let pts: Vec<Vec<f32>> = (0..6).map(|i| unit2(i as f64 * 17.0)).collect();
        let (ds, p) = singletons(&pts, vec![None; 6]);
        let mut seen = Vec::new();
        let mut obs = |q: &Partition| seen.push(q.len());
        one_to_one_merge(&p, &ds, 2, Some(&mut obs)).unwrap();
        assert_eq!(seen, vec![5, 4, 3, 2]);
    }

    #[test]
    fn start_level_scan() {
        // build a fake hierarchy with the given counts
        let pts: Vec<Vec<f32>> = (0..100).map(|i| unit2(i as f64)).collect();
        let ds = GcdDataset::unlabelled_only(FeatureMatrix::from_rows(&pts).unwrap());
        let mut h = run_snc(&ds, &ChainConfig::default()).unwrap();
        let template = h.levels[0].clone();
        h.levels = [100usize, 40, 12, 5]
            .iter()
            .map(|&k| Partition {
                clusters: template.clusters[..k].to_vec(),
                ..template.clone()
            })
            .collect();
        assert_eq!(find_start_level(&h, 15).unwrap(), 1);
        assert_eq!(find_start_level(&h, 4).unwrap(), 3);
        assert_eq!(find_start_level(&h, 12).unwrap(), 1);
        assert!(find_start_level(&h, 100).is_err());
    }

    /// Exhaustive reference: recompute the best pair from scratch every step.
    fn naive_merge(p: &Partition, ds: &GcdDataset, n_e: usize) -> Vec<(usize, usize)> {
        let mut slots: Vec<Option<Vec<usize>>> =
            p.clusters.iter().map(|c| Some(c.members.clone())).collect();
        let mut cents: Vec<Vec<f32>> = p.clusters.iter().map(|c| c.centroid.clone()).collect();
        let mut labels: Vec<Option<u32>> = p.clusters.iter().map(|c| c.label).collect();
        let mut out = Vec::new();
        while slots.iter().flatten().count() > n_e {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..slots.len() {
                for j in i + 1..slots.len() {
                    if slots[i].is_none() || slots[j].is_none() {
                        continue;
                    }
                    if let (Some(a), Some(b)) = (labels[i], labels[j]) {
                        if a != b {
                            continue;
                        }
                    }
                    let s = dot_f64(&cents[i], &cents[j]);
                    if best.is_none_or(|(_, _, v)| s > v) {
                        best = Some((i, j, s));
                    }
                }
            }
            let (i, j, _) = best.unwrap();
            let mut m = slots[i].take().unwrap();
            m.extend(slots[j].take().unwrap());
            m.sort_unstable();
            let f = ds.features();
            let mut sum = vec![0f64; f.d()];
            for &k in &m {
                for (s, &v) in sum.iter_mut().zip(f.row(k)) {
                    *s += f64::from(v);
                }
            }
            cents[i] = normalize_sum(&sum).unwrap();
            labels[i] = cluster_label(&m, ds);
            slots[i] = Some(m);
            out.push((i, j));
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn incremental_matches_exhaustive(
            angles in proptest::collection::vec(0u32..3600, 3..25),
            label_bits in proptest::collection::vec(0u8..4, 25),
        ) {
            let pts: Vec<Vec<f32>> = angles.iter().map(|&a| unit2(f64::from(a) / 10.0)).collect();
            let n = pts.len();
            // classes 0 and 1 always present so ids are contiguous
            let mut labels: Vec<Option<u32>> = (0..n)
                .map(|i| match label_bits[i] { 0 => Some(0), 1 => Some(1), _ => None })
                .collect();
            labels[0] = Some(0);
            labels[1] = Some(1);
            let (ds, p) = singletons(&pts, labels);
            let target = 2;
            let (q, trace) = one_to_one_merge(&p, &ds, target, None).unwrap();
            let pairs: Vec<_> = trace.steps.iter().map(|s| s.pair).collect();
            proptest::prop_assert_eq!(pairs, naive_merge(&p, &ds, target));
            proptest::prop_assert_eq!(q.len(), target);
            for c in &q.clusters {
                let labs: std::collections::BTreeSet<u32> =
                    c.members.iter().filter_map(|&i| ds.label(i)).collect();
                proptest::prop_assert!(labs.len() <= 1);
            }
            let mut all: Vec<usize> = q.clusters.iter().flat_map(|c| c.members.clone()).collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
