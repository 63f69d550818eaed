//! Command-line behaviour: help, exit codes, and a small end-to-end pipeline.

use std::path::Path;
use std::process::{Command, Output};

const VERBS: [&str; 9] = [
    "split",
    "train",
    "eval",
    "predict",
    "augment-preview",
    "plot",
    "confusion",
    "export-weights",
    "gen-shapes",
];

fn statenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statenet"))
        .arg("--quiet")
        .args(args)
        .env_remove("STATENET_SEED")
        .output()
        .expect("spawn statenet")
}

fn ok(args: &[&str]) -> String {
    let out = statenet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_verb_has_help() {
    for verb in VERBS {
        let out = statenet(&[verb, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{verb}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(statenet(&["no-such-verb"]).status.code(), Some(2));
    assert_eq!(statenet(&["train", "--optimizer", "lbfgs"]).status.code(), Some(2));
    let out = statenet(&["split", "--data", "/nonexistent/statenet", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn pipeline_from_shapes_to_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("shapes");
    let split = dir.path().join("split.json");
    let ckpt = dir.path().join("model");
    let log = dir.path().join("run.jsonl");
    ok(&["gen-shapes", "--out", s(&root), "--per-class", "8", "--size", "32"]);
    let counts: serde_json::Value = serde_json::from_str(&ok(&["split", "--data", s(&root), "--out", s(&split)])).unwrap();
    assert_eq!(counts["classes"], 11);
    assert_eq!(counts["train"].as_u64().unwrap() + counts["val"].as_u64().unwrap() + counts["test"].as_u64().unwrap(), 88);

    ok(&[
        "train", "--split", s(&split), "--image-size", "32", "--base-blocks", "1", "--epochs", "1",
        "--batch-size", "8", "--events", s(&log), "--checkpoint", s(&ckpt),
    ]);
    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--weights", s(&ckpt), "--split", s(&split)])).unwrap();
    let accuracy = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));

    let matrix = ok(&["confusion", "--weights", s(&ckpt), "--split", s(&split)]);
    assert!(matrix.contains("circle"));

    let image = std::fs::read_dir(root.join("ring")).unwrap().next().unwrap().unwrap().path();
    let ranking: serde_json::Value = serde_json::from_str(&ok(&["predict", "--weights", s(&ckpt), s(&image)])).unwrap();
    let probs: f64 = ranking["ranking"].as_array().unwrap().iter().map(|r| r["probability"].as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-4);

    let head = dir.path().join("head");
    ok(&["export-weights", "--weights", s(&ckpt), "--only", "head", "--out", s(&head)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&ok(&["export-weights", "--weights", s(&head)])).unwrap();
    assert!(!manifest["entries"].as_array().unwrap().is_empty());
    assert!(manifest["entries"].as_array().unwrap().iter().all(|e| !e["layer"].as_str().unwrap().starts_with("block")));

    let previews = dir.path().join("previews");
    ok(&["augment-preview", "--image", s(&image), "--out", s(&previews), "--count", "3"]);
    assert_eq!(std::fs::read_dir(&previews).unwrap().count(), 3);

    let svg = dir.path().join("plot.svg");
    ok(&["plot", "--out", s(&svg), s(&log)]);
    assert!(std::fs::read_to_string(svg).unwrap().contains("run"));
}
