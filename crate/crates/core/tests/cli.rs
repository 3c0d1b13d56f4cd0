use std::path::Path;
use std::process::{Command, Output};

use gdl::dictionary::{init_dictionary, TrainConfig};
use gdl::io::{load_dictionary, read_dataset, read_matrix_csv};
use gdl::model::validate_graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdl")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gdl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_d1(dir: &Path) {
    ok(dir, &["gen", "d1", "--per-class", "4", "--max-order", "20", "--seed", "3", "--out", "d.jsonl"]);
}

#[test]
fn generated_graphs_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    small_d1(dir.path());
    ok(dir.path(), &["gen", "d2", "--count", "6", "--out", "d2.jsonl"]);
    let d1 = read_dataset(dir.path().join("d.jsonl")).unwrap();
    let d2 = read_dataset(dir.path().join("d2.jsonl")).unwrap();
    assert_eq!((d1.len(), d2.len()), (12, 6));
    for g in d1.iter().chain(&d2) {
        validate_graph(g).unwrap();
        assert!(g.label.is_some());
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    small_d1(dir.path());
    ok(dir.path(), &["fit", "--data", "d.jsonl", "--epochs", "0", "--seed", "5", "--out", "dict.json"]);
    let saved = load_dictionary(dir.path().join("dict.json")).unwrap();
    let graphs = read_dataset(dir.path().join("d.jsonl")).unwrap();
    let cfg = TrainConfig { seed: 5, ..TrainConfig::new(3, 6) };
    let init = init_dictionary(&graphs, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(saved.atoms, init.atoms);
    let loss = std::fs::read_to_string(dir.path().join("dict.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1);
}

#[test]
fn fit_and_embed_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_d1(dir.path());
    for tag in ["a", "b"] {
        let dict = format!("{tag}.json");
        ok(dir.path(), &["fit", "--data", "d.jsonl", "--epochs", "1", "--batch", "4", "--out", &dict]);
        ok(dir.path(), &["embed", "--data", "d.jsonl", "--dict", &dict, "--out", &format!("{tag}.csv")]);
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.loss.csv"), read("b.loss.csv"));
    assert_eq!(read("a.csv"), read("b.csv"));
}

#[test]
fn mahalanobis_self_distances_vanish_and_cluster_reports_rand_index() {
    let dir = tempfile::tempdir().unwrap();
    small_d1(dir.path());
    ok(dir.path(), &["fit", "--data", "d.jsonl", "--epochs", "2", "--batch", "4", "--out", "dict.json"]);
    ok(dir.path(), &["embed", "--data", "d.jsonl", "--dict", "dict.json", "--out", "e.csv"]);
    ok(dir.path(), &["dist", "--dict", "dict.json", "--embeddings", "e.csv", "--out", "m.csv"]);
    let m = read_matrix_csv(std::fs::File::open(dir.path().join("m.csv")).unwrap()).unwrap();
    assert_eq!(m.dim(), (12, 12));
    for i in 0..12 {
        assert_eq!(m[[i, i]], 0.0);
        for j in 0..12 {
            assert_eq!(m[[i, j]], m[[j, i]]);
        }
    }
    let report = ok(dir.path(), &["cluster", "--embeddings", "e.csv", "--dict", "dict.json", "--k", "3", "--out", "l.csv"]);
    let ri: f64 = report.lines().find_map(|l| l.strip_prefix("rand_index=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&ri));
    let labels = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
    assert_eq!(labels.lines().next(), Some("index,cluster,label"));
    assert_eq!(labels.lines().count(), 13);
}

#[test]
fn stream_writes_trace_and_reports_switch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.json"), r#"{"segments": [{"class": 1, "count": 24}, {"class": 2, "count": 24}]}"#)
        .unwrap();
    let report = ok(
        dir.path(),
        &["stream", "--spec", "s.json", "--max-order", "15", "--batch", "8", "--optimizer", "sgd", "--window", "2", "--out", "t.csv"],
    );
    assert!(report.contains("steps=6"));
    assert!(report.contains("switch_steps=[3]"));
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,running_mean,event"));
    assert_eq!(trace.lines().count(), 7);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 3] = [
        &["fit", "--data", "missing.jsonl", "--out", "x.json"],
        &["gen", "d1", "--min-order", "30", "--max-order", "10", "--out", "x.jsonl"],
        &["fit", "--no-such-flag"],
    ];
    for args in cases {
        let out = gdl(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    std::fs::write(dir.path().join("s.json"), r#"{"segments": [{"class": 9, "count": 2}]}"#).unwrap();
    let out = gdl(dir.path(), &["stream", "--spec", "s.json", "--out", "t.csv"]);
    assert!(!out.status.success());
}
