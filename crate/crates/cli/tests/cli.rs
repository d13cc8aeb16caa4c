use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn snc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Blobs {
    _dir: TempDir,
    root: PathBuf,
}

impl Blobs {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = snc(&["gen-blobs", "--out-dir", s(&root)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON object");
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn assign_then_eval_reports_accuracy() {
    let b = Blobs::new();
    let pred = b.path("pred.csv");
    let out = snc(&[
        "assign", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")),
        "--k", "10", "--out", s(&pred),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&pred).unwrap();
    assert!(csv.starts_with("index,cluster\n"));
    assert_eq!(csv.lines().count(), 1251);

    let out = snc(&["eval", "--pred", s(&pred), "--truth", s(&b.path("truth.csv")), "--seen", s(&b.path("labels.csv"))]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["eval_set"], "unlabelled");
    assert_eq!(v["result"]["eval_size"], 1000);
    let acc = v["result"]["acc_all"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(v["result"]["acc_seen"].is_number() && v["result"]["acc_unseen"].is_number());

    let out = snc(&["eval", "--pred", s(&pred), "--truth", s(&b.path("truth.csv")), "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("metric,value\nacc_all,"), "{text}");
}

#[test]
fn estimate_k_lands_near_the_true_class_count() {
    let b = Blobs::new();
    let out = snc(&["estimate-k", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv"))]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let k = v["result"]["k"].as_u64().unwrap();
    assert!((8..=12).contains(&k), "k = {k}");
    assert!(v["result"].get("runtime_ms").is_none());
    assert_eq!(v["config"]["ratio"], 0.8);
    assert_eq!(v["config"]["chain"], "sqrt");
}

#[test]
fn cluster_reports_purity_with_truth() {
    let b = Blobs::new();
    let out = snc(&[
        "cluster", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")),
        "--truth", s(&b.path("truth.csv")),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let levels = v["result"]["hierarchy"]["levels"].as_array().unwrap();
    assert_eq!(levels[0]["purity"], 1.0);
    assert_eq!(levels[0]["num_clusters"], 1250);
    assert_eq!(v["result"]["label_values"].as_array().unwrap().len(), 5);
}

#[test]
fn pseudo_and_loss_run_on_blobs() {
    let b = Blobs::new();
    let out = snc(&["pseudo", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")), "--level", "2"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("index,cluster\n0,"));

    let batch = b.path("batch.json");
    std::fs::write(&batch, r#"{"indices": [0, 1, 2, 3], "pseudo": [0, 0, 1, 1]}"#).unwrap();
    let out = snc(&["loss", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")), "--batch", s(&batch)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["batch_size"], 4);
    assert!(v["result"]["total"].as_f64().unwrap() >= 0.0);
    assert!(v["result"].get("pseudo_level").is_none());

    let out = snc(&[
        "loss", "--features", s(&b.path("features.bin")), "--batch", s(&batch), "--level", "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
}

#[test]
fn bench_reports_both_methods() {
    let b = Blobs::new();
    let out = snc(&[
        "bench", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")), "--k", "10",
        "--truth", s(&b.path("truth.csv")),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let m = &v["result"]["measurements"];
    assert!(m["snc"]["wall_ms"].as_f64().unwrap() > 0.0);
    assert!(m["semi_kmeans"]["peak_heap_bytes"].as_u64().unwrap() > 0);
    assert!(v["result"]["snc"]["accuracy"]["acc_all"].is_number());
}

#[test]
fn constraint_floor_exits_with_code_4() {
    let b = Blobs::new();
    let out = snc(&["assign", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")), "--k", "3"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_kind(&out), "constraint");
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let b = Blobs::new();
    let out = snc(&["cluster", "--features", s(&b.path("features.bin")), "--labels", s(&b.path("labels.csv")), "--algorithm", "finch"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    let out = snc(&["assign", "--k"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    let out = snc(&["assign", "--features", s(&b.path("missing.bin")), "--k", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "io");

    let bad = b.path("bad.csv");
    std::fs::write(&bad, "0,1\n0,2\n").unwrap();
    let out = snc(&["assign", "--features", s(&b.path("features.bin")), "--labels", s(&bad), "--k", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "parse");

    assert_eq!(snc(&["--help"]).status.code(), Some(0));
}

#[test]
fn csv_features_give_the_same_assignment_as_binary() {
    let b = Blobs::new();
    let csv_dir = b.path("csv");
    assert!(snc(&["gen-blobs", "--format", "csv", "--out-dir", s(&csv_dir)]).status.success());
    let run = |features: &Path| {
        snc(&["assign", "--features", s(features), "--labels", s(&b.path("labels.csv")), "--k", "10"]).stdout
    };
    assert_eq!(run(&b.path("features.bin")), run(&csv_dir.join("features.csv")));
}
