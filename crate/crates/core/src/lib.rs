//! Semi-supervised hierarchical clustering for generalized category discovery.
//!
//! The crate clusters precomputed, ℓ2-normalized embeddings of a partially
//! labelled dataset:
//!
//! * [`snc`] builds a clustering hierarchy from selective-neighbor graphs;
//! * [`merge`] reaches an exact cluster count by constrained one-to-one merging;
//! * [`estimate`] picks the number of classes from a joint reference score;
//! * [`metrics`] scores assignments (Hungarian accuracy, purity, silhouette);
//! * [`loss`] evaluates the contrastive objectives on a mini-batch;
//! * [`baselines`] provides FINCH, k-means and semi-supervised k-means.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod graph;
pub mod loss;
pub mod merge;
pub mod metrics;
pub mod similarity;
pub mod snc;
pub mod synth;

pub use dataset::{FeatureFormat, FeatureMatrix, GcdDataset, LabelledSplit};
pub use error::{Error, Result};
pub use snc::{ChainConfig, ChainRule, Hierarchy, Partition};
