//! Selective neighbor clustering.
//!
//! Each level treats the clusters of the previous level as points. Every
//! cluster picks at most one neighbor κ:
//!
//! * labelled clusters of one class are linked into disjoint chains of at most
//!   λ clusters, each link going to the most similar cluster of the same class
//!   not yet placed on a chain; the last cluster of a chain has no κ;
//! * unlabelled clusters take the most similar other cluster, labelled or not.
//!
//! The next level is given by the connected components of the κ graph.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::GcdDataset;
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, connected_components};
use crate::similarity::{dot, nearest_by_dot};

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Instance indices, ascending.
    pub members: Vec<usize>,
    /// Unit-norm mean of the members' features.
    pub centroid: Vec<f32>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub level: usize,
    pub clusters: Vec<Cluster>,
    /// Cluster index of every instance.
    pub assignment: Vec<usize>,
}

impl Partition {
    pub fn singletons(ds: &GcdDataset) -> Self {
        let f = ds.features();
        let clusters = (0..ds.n())
            .map(|i| Cluster {
                members: vec![i],
                centroid: f.row(i).to_vec(),
                label: ds.label(i),
            })
            .collect();
        Self {
            level: 0,
            clusters,
            assignment: (0..ds.n()).collect(),
        }
    }

    /// Builds a partition from member groups, in the order given. Groups must
    /// cover every instance exactly once.
    pub fn from_groups(ds: &GcdDataset, level: usize, groups: Vec<Vec<usize>>) -> Self {
        let mut assignment = vec![usize::MAX; ds.n()];
        let clusters = groups
            .into_iter()
            .enumerate()
            .map(|(c, mut members)| {
                members.sort_unstable();
                for &i in &members {
                    assignment[i] = c;
                }
                Cluster {
                    centroid: mean_direction(ds, &members),
                    label: cluster_label(&members, ds),
                    members,
                }
            })
            .collect();
        debug_assert!(assignment.iter().all(|&a| a != usize::MAX));
        Self {
            level,
            clusters,
            assignment,
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.centroid.len())
    }

    /// Indices of clusters carrying a label (`Γ_L`).
    pub fn labelled(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&c| self.clusters[c].label.is_some())
    }

    /// Number of distinct labels carried by clusters.
    pub fn distinct_labels(&self) -> usize {
        let mut labels: Vec<u32> = self.clusters.iter().filter_map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    pub fn centroid_matrix(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * self.dim());
        for c in &self.clusters {
            out.extend_from_slice(&c.centroid);
        }
        out
    }
}

/// Normalized mean of the members' features.
pub(crate) fn mean_direction(ds: &GcdDataset, members: &[usize]) -> Vec<f32> {
    let f = ds.features();
    let mut sum = vec![0f64; f.d()];
    for &i in members {
        for (s, &v) in sum.iter_mut().zip(f.row(i)) {
            *s += f64::from(v);
        }
    }
    normalize_sum(&sum).unwrap_or_else(|| f.row(members[0]).to_vec())
}

pub(crate) fn normalize_sum(sum: &[f64]) -> Option<Vec<f32>> {
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| sum.iter().map(|v| (v / norm) as f32).collect())
}

/// Majority class among the labelled members, lowest class id on ties.
pub fn cluster_label(members: &[usize], ds: &GcdDataset) -> Option<u32> {
    let mut counts = vec![0usize; ds.num_classes()];
    let mut any = false;
    for &i in members {
        if let Some(c) = ds.label(i) {
            counts[c as usize] += 1;
            any = true;
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for (c, &k) in counts.iter().enumerate() {
        if k > counts[best] {
            best = c;
        }
    }
    Some(best as u32)
}

/// How the chain length λ follows the number of labelled clusters in a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChainRule {
    #[default]
    Sqrt,
    Cbrt,
    Half,
    Fixed(usize),
}

impl fmt::Display for ChainRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainRule::Sqrt => f.write_str("sqrt"),
            ChainRule::Cbrt => f.write_str("cbrt"),
            ChainRule::Half => f.write_str("half"),
            ChainRule::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for ChainRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(ChainRule::Sqrt),
            "cbrt" => Ok(ChainRule::Cbrt),
            "half" => Ok(ChainRule::Half),
            _ => {
                let k = s
                    .strip_prefix("fixed:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "unknown chain rule `{s}` (expected sqrt, cbrt, half or fixed:<len>)"
                        ))
                    })?;
                if k == 0 {
                    return Err(Error::InvalidInput("fixed chain length must be >= 1".into()));
                }
                Ok(ChainRule::Fixed(k))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ChainConfig {
    pub rule: ChainRule,
    /// Maximum number of merge steps above the singleton level.
    pub max_levels: Option<usize>,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rule == ChainRule::Fixed(0) {
            return Err(Error::InvalidInput("fixed chain length must be >= 1".into()));
        }
        Ok(())
    }
}

fn ceil_root(n: usize, k: u32) -> usize {
    let mut r = (n as f64).powf(1.0 / f64::from(k)).floor() as usize;
    while r.pow(k) > n {
        r -= 1;
    }
    while r.pow(k) < n {
        r += 1;
    }
    r
}

/// λ for a class with `n_l` labelled clusters at the current level.
pub fn chain_length(n_l: usize, rule: ChainRule) -> usize {
    let lambda = match rule {
        ChainRule::Sqrt => ceil_root(n_l, 2),
        ChainRule::Cbrt => ceil_root(n_l, 3),
        ChainRule::Half => n_l.div_ceil(2),
        ChainRule::Fixed(k) => k,
    };
    lambda.max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLambda {
    pub class: u32,
    pub labelled_clusters: usize,
    pub lambda: usize,
}

/// A path of same-class clusters; `clusters[k]`'s κ is `clusters[k + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub class: u32,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveNeighborMap {
    pub kappa: Vec<Option<usize>>,
    pub chains: Vec<Chain>,
    /// One entry per class with labelled clusters, ascending class id.
    pub lambdas: Vec<ClassLambda>,
}

impl SelectiveNeighborMap {
    /// `(chain index, position)` of every labelled cluster.
    pub fn chain_positions(&self) -> Vec<Option<(usize, usize)>> {
        let mut pos = vec![None; self.kappa.len()];
        for (k, chain) in self.chains.iter().enumerate() {
            for (p, &c) in chain.clusters.iter().enumerate() {
                pos[c] = Some((k, p));
            }
        }
        pos
    }
}

pub fn select_neighbors(p: &Partition, cfg: &ChainConfig) -> SelectiveNeighborMap {
    let n = p.len();
    let d = p.dim();
    let mut kappa = vec![None; n];
    if n < 2 {
        return SelectiveNeighborMap {
            kappa,
            chains: Vec::new(),
            lambdas: Vec::new(),
        };
    }

    let unlabelled: Vec<usize> = (0..n).filter(|&c| p.clusters[c].label.is_none()).collect();
    if !unlabelled.is_empty() {
        let base = p.centroid_matrix();
        let mut queries = Vec::with_capacity(unlabelled.len() * d);
        for &c in &unlabelled {
            queries.extend_from_slice(&p.clusters[c].centroid);
        }
        let exclude: Vec<Option<usize>> = unlabelled.iter().map(|&c| Some(c)).collect();
        for (&c, best) in unlabelled.iter().zip(nearest_by_dot(&queries, &base, d, &exclude)) {
            kappa[c] = best.map(|(j, _)| j);
        }
    }

    let mut by_class: Vec<(u32, Vec<usize>)> = Vec::new();
    {
        let mut labelled: Vec<(u32, usize)> =
            p.labelled().map(|c| (p.clusters[c].label.unwrap(), c)).collect();
        labelled.sort_unstable();
        for (class, c) in labelled {
            match by_class.last_mut() {
                Some((k, v)) if *k == class => v.push(c),
                _ => by_class.push((class, vec![c])),
            }
        }
    }

    let per_class: Vec<(ClassLambda, Vec<Chain>)> = by_class
        .par_iter()
        .map(|(class, members)| {
            let lambda = chain_length(members.len(), cfg.rule);
            let chains = build_chains(p, *class, members, lambda);
            (
                ClassLambda {
                    class: *class,
                    labelled_clusters: members.len(),
                    lambda,
                },
                chains,
            )
        })
        .collect();

    let mut chains = Vec::new();
    let mut lambdas = Vec::with_capacity(per_class.len());
    for (lambda, class_chains) in per_class {
        for chain in &class_chains {
            for w in chain.clusters.windows(2) {
                kappa[w[0]] = Some(w[1]);
            }
        }
        chains.extend(class_chains);
        lambdas.push(lambda);
    }
    SelectiveNeighborMap {
        kappa,
        chains,
        lambdas,
    }
}

/// Greedy disjoint chains over one class; `members` ascending.
fn build_chains(p: &Partition, class: u32, members: &[usize], lambda: usize) -> Vec<Chain> {
    let mut in_pool = vec![true; members.len()];
    let mut remaining = members.len();
    let mut next_start = 0;
    let mut chains = Vec::new();
    while remaining > 0 {
        while !in_pool[next_start] {
            next_start += 1;
        }
        let mut cursor = next_start;
        in_pool[cursor] = false;
        remaining -= 1;
        let mut chain = vec![members[cursor]];
        while chain.len() < lambda && remaining > 0 {
            let from = &p.clusters[members[cursor]].centroid;
            let mut best: Option<(usize, f32)> = None;
            for (k, &m) in members.iter().enumerate() {
                if !in_pool[k] {
                    continue;
                }
                let s = dot(from, &p.clusters[m].centroid);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            let (k, _) = best.expect("pool is non-empty");
            in_pool[k] = false;
            remaining -= 1;
            chain.push(members[k]);
            cursor = k;
        }
        chains.push(Chain {
            class,
            clusters: chain,
        });
    }
    chains
}

/// Merges the κ-graph components of `p` into the next level.
pub fn merge_components(p: &Partition, ds: &GcdDataset, kappa: &[Option<usize>]) -> Partition {
    let graph = build_adjacency(kappa).expect("neighbor maps are in range and self-free");
    let comp = connected_components(&graph);
    let count = comp.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (c, &g) in comp.iter().enumerate() {
        groups[g].extend_from_slice(&p.clusters[c].members);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_unstable_by_key(|g| g[0]);
    Partition::from_groups(ds, p.level + 1, groups)
}

/// One level up: selective neighbors, adjacency, components.
pub fn snc_step(
    p: &Partition,
    ds: &GcdDataset,
    cfg: &ChainConfig,
) -> (Partition, SelectiveNeighborMap) {
    let map = select_neighbors(p, cfg);
    let next = merge_components(p, ds, &map.kappa);
    (next, map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    /// `levels[0]` is the singleton partition.
    pub levels: Vec<Partition>,
    pub config: ChainConfig,
    /// `lambda_trace[p]` holds the λ used to build `levels[p + 1]`.
    pub lambda_trace: Vec<Vec<ClassLambda>>,
}

impl Hierarchy {
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(Partition::len).collect()
    }

    pub fn top(&self) -> &Partition {
        self.levels.last().expect("hierarchy has at least the singleton level")
    }

    pub fn report(&self) -> HierarchyReport {
        HierarchyReport {
            levels: self
                .levels
                .iter()
                .map(|p| LevelReport {
                    level: p.level,
                    num_clusters: p.len(),
                    purity: None,
                    clusters: p
                        .clusters
                        .iter()
                        .map(|c| ClusterReport {
                            members: c.members.clone(),
                            label: c.label,
                        })
                        .collect(),
                })
                .collect(),
            provenance: Provenance {
                chain: self.config,
                lambda_trace: self.lambda_trace.clone(),
            },
        }
    }
}

/// Serializable view of a [`Hierarchy`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub levels: Vec<LevelReport>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub num_clusters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    pub clusters: Vec<ClusterReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub members: Vec<usize>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub chain: ChainConfig,
    pub lambda_trace: Vec<Vec<ClassLambda>>,
}

/// Builds the full hierarchy bottom-up until at most `N_L` clusters remain or
/// a step stops reducing the count.
pub fn run_snc(ds: &GcdDataset, cfg: &ChainConfig) -> Result<Hierarchy> {
    cfg.validate()?;
    if ds.n() < 2 {
        return Err(Error::InvalidInput(format!(
            "clustering needs at least 2 instances, got {}",
            ds.n()
        )));
    }
    let mut levels = vec![Partition::singletons(ds)];
    let mut lambda_trace = Vec::new();
    loop {
        let cur = levels.last().unwrap();
        if cur.len() <= ds.num_classes() || cur.len() < 2 {
            break;
        }
        if cfg.max_levels.is_some_and(|m| levels.len() > m) {
            break;
        }
        let (next, map) = snc_step(cur, ds, cfg);
        if next.len() >= cur.len() {
            break;
        }
        levels.push(next);
        lambda_trace.push(map.lambdas);
    }
    Ok(Hierarchy {
        levels,
        config: *cfg,
        lambda_trace,
    })
}

pub const DEFAULT_PSEUDO_LEVEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabels {
    pub assignment: Vec<usize>,
    /// Level actually used after clamping to the top.
    pub level: usize,
    pub num_clusters: usize,
    /// Set when the level has fewer than twice as many clusters as labelled classes.
    pub low_overclustering: bool,
}

/// Cluster assignment of `level` (0 = singletons), clamped to the top level.
pub fn pseudo_labels(h: &Hierarchy, level: usize, num_classes: usize) -> Result<PseudoLabels> {
    if level == 0 {
        return Err(Error::InvalidInput(
            "level 0 is the singleton partition and yields no pseudo positives".into(),
        ));
    }
    let level = level.min(h.levels.len() - 1);
    let p = &h.levels[level];
    Ok(PseudoLabels {
        assignment: p.assignment.clone(),
        level,
        num_clusters: p.len(),
        low_overclustering: p.len() < 2 * num_classes,
    })
}
