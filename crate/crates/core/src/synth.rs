//! Synthetic partially labelled blobs on the unit sphere.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{l2_normalize, FeatureMatrix, GcdDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    /// Classes `0..seen` contribute labelled instances.
    pub seen: usize,
    pub unlabelled_per_class: usize,
    pub labelled_per_seen_class: usize,
    pub dim: usize,
    /// Per-coordinate noise standard deviation around each unit center.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            seen: 5,
            unlabelled_per_class: 100,
            labelled_per_seen_class: 50,
            dim: 16,
            sigma: 0.05,
            seed: 0,
        }
    }
}

pub struct Blobs {
    /// Normalized features with labels on the labelled part only.
    pub dataset: GcdDataset,
    /// True class of every instance.
    pub truth: Vec<u32>,
    pub centers: Vec<Vec<f32>>,
    /// Smallest distance between two centers divided by `sigma`.
    pub separation: f64,
}

pub fn generate_blobs(spec: &BlobSpec) -> Result<Blobs> {
    if spec.classes == 0 || spec.dim == 0 {
        return Err(Error::InvalidInput("blobs need at least one class and one dimension".into()));
    }
    if spec.seen > spec.classes {
        return Err(Error::InvalidInput(format!(
            "{} seen classes out of {}",
            spec.seen, spec.classes
        )));
    }
    if spec.seen > 0 && spec.labelled_per_seen_class == 0 {
        return Err(Error::InvalidInput(
            "seen classes need at least one labelled instance each".into(),
        ));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be finite and >= 0, got {}", spec.sigma)));
    }
    let noise = Normal::new(0.0, spec.sigma)
        .map_err(|e| Error::InvalidInput(format!("bad sigma {}: {e}", spec.sigma)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();

    // (class, labelled)
    let mut items: Vec<(u32, bool)> = Vec::new();
    for c in 0..spec.classes {
        if c < spec.seen {
            items.extend(std::iter::repeat_n((c as u32, true), spec.labelled_per_seen_class));
        }
        items.extend(std::iter::repeat_n((c as u32, false), spec.unlabelled_per_class));
    }
    if items.len() < 2 {
        return Err(Error::InvalidInput("blobs need at least two instances".into()));
    }
    items.shuffle(&mut rng);
    let mut values = Vec::with_capacity(items.len() * spec.dim);
    for &(c, _) in &items {
        for &x in &centers[c as usize] {
            values.push(x + noise.sample(&mut rng) as f32);
        }
    }
    let raw = FeatureMatrix::new(items.len(), spec.dim, values)?;
    let features = l2_normalize(&raw)?;
    let labels = items.iter().map(|&(c, l)| l.then_some(c)).collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            let d2: f64 = centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(&x, &y)| f64::from(x - y).powi(2))
                .sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    Ok(Blobs {
        dataset: GcdDataset::new(features, labels)?,
        truth: items.iter().map(|&(c, _)| c).collect(),
        centers,
        separation: if spec.sigma > 0.0 { min_dist / spec.sigma } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let b = generate_blobs(&BlobSpec::default()).unwrap();
        assert_eq!(b.dataset.n(), 10 * 100 + 5 * 50);
        assert_eq!(b.dataset.labelled_indices().len(), 250);
        assert_eq!(b.dataset.num_classes(), 5);
        for &i in b.dataset.labelled_indices() {
            assert_eq!(b.dataset.label(i), Some(b.truth[i]));
        }
        assert!(b.dataset.features().is_normalized());
        assert!(b.separation > 5.0);
    }

    #[test]
    fn seeded() {
        let a = generate_blobs(&BlobSpec::default()).unwrap();
        let b = generate_blobs(&BlobSpec::default()).unwrap();
        assert_eq!(a.dataset.features().values(), b.dataset.features().values());
        let c = generate_blobs(&BlobSpec { seed: 1, ..BlobSpec::default() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_blobs(&BlobSpec { seen: 11, ..BlobSpec::default() }).is_err());
        assert!(generate_blobs(&BlobSpec { sigma: -1.0, ..BlobSpec::default() }).is_err());
    }
}
