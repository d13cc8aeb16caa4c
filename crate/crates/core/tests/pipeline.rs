use std::collections::{BTreeMap, BTreeSet};

use snc_core::baselines::{semi_kmeans, DEFAULT_KMEANS_ITERS};
use snc_core::dataset::{
    load_features, load_labels, write_features, write_index_csv, FeatureFormat,
};
use snc_core::estimate::{assign_labels, estimate_k, EstimateConfig};
use snc_core::merge::{find_start_level, one_to_one_merge};
use snc_core::snc::run_snc;
use snc_core::synth::{generate_blobs, BlobSpec, Blobs};
use snc_core::{ChainConfig, GcdDataset};

fn blobs() -> Blobs {
    generate_blobs(&BlobSpec::default()).unwrap()
}

fn clusters_of(assignment: &[usize]) -> usize {
    assignment.iter().collect::<BTreeSet<_>>().len()
}

#[test]
fn features_and_labels_survive_a_disk_round_trip() {
    let b = blobs();
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("f.bin", FeatureFormat::Binary), ("f.csv", FeatureFormat::Csv)] {
        let path = dir.path().join(name);
        write_features(&path, b.dataset.features(), format).unwrap();
        let back = load_features(&path, FeatureFormat::from_path(&path)).unwrap();
        assert_eq!(back.n(), b.dataset.n());
        assert_eq!(back.values(), b.dataset.features().values());
    }
    let path = dir.path().join("labels.csv");
    write_index_csv(&path, "label", b.dataset.labels()).unwrap();
    let labels = load_labels(&path, b.dataset.n()).unwrap();
    // remapping is first-seen, so compare the partition the labels induce
    let mut pairs = BTreeMap::new();
    for (orig, remapped) in b.dataset.labels().iter().zip(&labels.ids) {
        assert_eq!(orig.is_some(), remapped.is_some());
        if let (Some(o), Some(r)) = (orig, remapped) {
            assert_eq!(*pairs.entry(*o).or_insert(*r), *r);
            assert_eq!(labels.original[*r as usize], u64::from(*o));
        }
    }
}

#[test]
fn hierarchy_is_a_strict_refinement_chain() {
    let b = blobs();
    let h = run_snc(&b.dataset, &ChainConfig::default()).unwrap();
    assert_eq!(h.levels[0].len(), b.dataset.n());
    for w in h.levels.windows(2) {
        assert!(w[1].len() < w[0].len());
        for c in &w[0].clusters {
            let parents: BTreeSet<usize> = c.members.iter().map(|&i| w[1].assignment[i]).collect();
            assert_eq!(parents.len(), 1, "cluster split across the next level");
        }
    }
}

#[test]
fn assignment_has_k_clusters_and_separates_labelled_classes() {
    let b = blobs();
    let ds = &b.dataset;
    for k in [5, 10, 20] {
        let a = assign_labels(ds, k, &ChainConfig::default()).unwrap();
        assert_eq!(clusters_of(&a.assignment), k);
        let mut owner: BTreeMap<usize, u32> = BTreeMap::new();
        for &i in ds.labelled_indices() {
            let class = ds.label(i).unwrap();
            assert_eq!(*owner.entry(a.assignment[i]).or_insert(class), class);
        }
    }
}

#[test]
fn merge_from_start_level_reaches_target_through_observer() {
    let b = blobs();
    let h = run_snc(&b.dataset, &ChainConfig::default()).unwrap();
    let start = find_start_level(&h, 12).unwrap();
    let mut seen_counts = Vec::new();
    let mut observe = |p: &snc_core::Partition| seen_counts.push(p.len());
    let (p, trace) = one_to_one_merge(&h.levels[start], &b.dataset, 10, Some(&mut observe)).unwrap();
    assert_eq!(p.len(), 10);
    assert_eq!(trace.steps.len(), h.levels[start].len() - 10);
    assert!(seen_counts.windows(2).all(|w| w[1] + 1 == w[0]));
    assert_eq!(seen_counts.last(), Some(&10));
}

#[test]
fn estimate_lies_in_its_own_band() {
    let b = blobs();
    let est = estimate_k(&b.dataset, &EstimateConfig::default(), &ChainConfig::default()).unwrap();
    assert!(est.n_e <= est.k && est.k <= est.n_o);
    assert!(est.k >= b.dataset.num_classes());
    assert_eq!(est.train_size + est.val_size, b.dataset.labelled_indices().len());
    let again = estimate_k(&b.dataset, &EstimateConfig::default(), &ChainConfig::default()).unwrap();
    assert_eq!(again.k, est.k);
    assert_eq!(again.scan, est.scan);
}

#[test]
fn semi_kmeans_keeps_labelled_instances_on_their_class_centroid() {
    let b = blobs();
    let r = semi_kmeans(&b.dataset, 10, 0, DEFAULT_KMEANS_ITERS).unwrap();
    for &i in b.dataset.labelled_indices() {
        assert_eq!(r.assignment[i], b.dataset.label(i).unwrap() as usize);
    }
    assert_eq!(clusters_of(&r.assignment), 10);
}

#[test]
fn fully_unlabelled_data_still_clusters() {
    let b = blobs();
    let ds = GcdDataset::unlabelled_only(b.dataset.features().clone());
    let a = assign_labels(&ds, 10, &ChainConfig::default()).unwrap();
    assert_eq!(clusters_of(&a.assignment), 10);
}
