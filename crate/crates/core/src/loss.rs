//! Forward evaluation of the batch contrastive objectives.
//!
//! Three positive sets are built per batch member: same-label labelled peers,
//! same-pseudo-cluster peers, and their union form used by the unified loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, GcdDataset, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::snc::{pseudo_labels, run_snc, ChainConfig, PseudoLabels};

/// One training batch. All per-member vectors share the member order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    embeddings: FeatureMatrix,
    /// Class of labelled members, `None` for unlabelled ones.
    pub labels: Vec<Option<u32>>,
    pub pseudo: Vec<usize>,
}

impl Batch {
    pub fn new(
        indices: Vec<usize>,
        embeddings: FeatureMatrix,
        labels: Vec<Option<u32>>,
        pseudo: Vec<usize>,
    ) -> Result<Self> {
        let m = indices.len();
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "a batch needs at least 2 members, got {m}"
            )));
        }
        if embeddings.n() != m || labels.len() != m || pseudo.len() != m {
            return Err(Error::InvalidInput(format!(
                "batch of {m} members has {} embeddings, {} labels and {} pseudo ids",
                embeddings.n(),
                labels.len(),
                pseudo.len()
            )));
        }
        for i in 0..m {
            let norm = embeddings
                .row(i)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "embedding of batch member {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            indices,
            embeddings,
            labels,
            pseudo,
        })
    }

    /// Gathers the batch from a dataset and a per-instance pseudo assignment.
    pub fn from_dataset(ds: &GcdDataset, indices: Vec<usize>, pseudo_all: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= ds.n()) {
            return Err(Error::InvalidInput(format!(
                "batch index {i} is out of range 0..{}",
                ds.n()
            )));
        }
        if pseudo_all.len() != ds.n() {
            return Err(Error::InvalidInput(format!(
                "{} pseudo ids for {} instances",
                pseudo_all.len(),
                ds.n()
            )));
        }
        let embeddings = ds.features().select_rows(&indices)?;
        let labels = indices.iter().map(|&i| ds.label(i)).collect();
        let pseudo = indices.iter().map(|&i| pseudo_all[i]).collect();
        Self::new(indices, embeddings, labels, pseudo)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn embeddings(&self) -> &FeatureMatrix {
        &self.embeddings
    }

    pub fn is_labelled(&self, member: usize) -> bool {
        self.labels[member].is_some()
    }
}

/// Positive sets per batch member, as member positions in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositiveSets {
    /// Same-class labelled peers; empty for unlabelled members.
    pub same_label: Vec<Vec<usize>>,
    /// Same-pseudo-cluster peers.
    pub same_cluster: Vec<Vec<usize>>,
    /// Labelled members: same-label peers plus unlabelled same-cluster peers.
    /// Unlabelled members: same-cluster peers.
    pub unified: Vec<Vec<usize>>,
}

pub fn build_positive_sets(b: &Batch) -> PositiveSets {
    let m = b.len();
    let mut same_label = vec![Vec::new(); m];
    let mut same_cluster = vec![Vec::new(); m];
    let mut unified = vec![Vec::new(); m];
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            let label_peer = b.labels[i].is_some() && b.labels[i] == b.labels[j];
            let cluster_peer = b.pseudo[i] == b.pseudo[j];
            if label_peer {
                same_label[i].push(j);
            }
            if cluster_peer {
                same_cluster[i].push(j);
            }
            let in_unified = if b.is_labelled(i) {
                label_peer || (cluster_peer && !b.is_labelled(j))
            } else {
                cluster_peer
            };
            if in_unified {
                unified[i].push(j);
            }
        }
    }
    PositiveSets {
        same_label,
        same_cluster,
        unified,
    }
}

/// Which members take part as anchors and as softmax candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    LabelledOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_s: f64,
    pub tau_a: f64,
    pub tau_u: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.07,
            tau_a: 0.1,
            tau_u: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_s", self.tau_s), ("tau_a", self.tau_a), ("tau_u", self.tau_u)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be a positive temperature, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Aggregate of one contrastive term over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerm {
    pub sum: f64,
    /// `sum / scored`, zero when nothing was scored.
    pub mean: f64,
    pub scored: usize,
    /// Anchors passed over because their positive set was empty.
    pub skipped: usize,
}

/// Per-member loss; `None` for members outside the scope or without positives.
pub fn member_losses(b: &Batch, positives: &[Vec<usize>], scope: Scope, tau: f64) -> Result<Vec<Option<f64>>> {
    let m = b.len();
    if positives.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} positive sets for a batch of {m}",
            positives.len()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let in_scope = |j: usize| scope == Scope::All || b.is_labelled(j);
    for (i, set) in positives.iter().enumerate() {
        if !in_scope(i) {
            continue;
        }
        if let Some(&q) = set.iter().find(|&&q| q >= m || q == i || !in_scope(q)) {
            return Err(Error::InvalidInput(format!(
                "positive {q} of batch member {i} is not another in-scope member"
            )));
        }
    }
    let f = &b.embeddings;
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            if !in_scope(i) || positives[i].is_empty() {
                return None;
            }
            let zi = f.row(i);
            let mut logits = vec![f64::NEG_INFINITY; m];
            for j in (0..m).filter(|&j| j != i && in_scope(j)) {
                let dot: f64 = zi.iter().zip(f.row(j)).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
                logits[j] = dot / tau;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            let pos = &positives[i];
            let acc: f64 = pos.iter().map(|&q| logits[q] - lse).sum();
            Some(-acc / pos.len() as f64)
        })
        .collect())
}

/// Mean supervised contrastive loss over the scored anchors.
pub fn sup_con_loss(b: &Batch, positives: &[Vec<usize>], scope: Scope, tau: f64) -> Result<LossTerm> {
    let per = member_losses(b, positives, scope, tau)?;
    let anchors = (0..b.len()).filter(|&i| scope == Scope::All || b.is_labelled(i)).count();
    let sum: f64 = per.iter().flatten().sum();
    let scored = per.iter().flatten().count();
    Ok(LossTerm {
        sum,
        mean: if scored > 0 { sum / scored as f64 } else { 0.0 },
        scored,
        skipped: anchors - scored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TotalLoss {
    /// All-data term over same-cluster positives.
    pub all_data: LossTerm,
    /// Labelled-only term over same-label positives.
    pub supervised: LossTerm,
    /// Sum of both terms' per-member sums.
    pub total: f64,
}

pub fn total_loss(b: &Batch, sets: &PositiveSets, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let all_data = sup_con_loss(b, &sets.same_cluster, Scope::All, cfg.tau_a)?;
    let supervised = sup_con_loss(b, &sets.same_label, Scope::LabelledOnly, cfg.tau_s)?;
    Ok(TotalLoss {
        all_data,
        supervised,
        total: all_data.sum + supervised.sum,
    })
}

pub fn unified_loss(b: &Batch, sets: &PositiveSets, cfg: &LossConfig) -> Result<LossTerm> {
    cfg.validate()?;
    sup_con_loss(b, &sets.unified, Scope::All, cfg.tau_u)
}

/// Clusters the dataset and returns the pseudo labels of `level`.
pub fn refresh_pseudo(ds: &GcdDataset, chain: &ChainConfig, level: usize) -> Result<PseudoLabels> {
    if level == 0 {
        return Err(Error::InvalidInput(
            "level 0 is the singleton partition and yields no pseudo positives".into(),
        ));
    }
    let h = run_snc(ds, chain)?;
    pseudo_labels(&h, level, ds.num_classes())
}
