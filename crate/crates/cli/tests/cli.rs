//! End-to-end runs of the `dvc` binary on a tiny synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvc")).args(args).env_remove("DVC_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn dvc_ok(args: &[&str]) -> Output {
    let out = dvc(args);
    assert!(out.status.success(), "dvc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data with its config shrunk to a few seconds of training.
fn tiny_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    dvc_ok(&["make-synthetic", "--out", s(&data), "--videos", "3", "--max-events", "3", "--feature-dim", "8"]);
    let path = data.join("config.json");
    let mut config: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let small = json!({
        "concepts.count": 5, "concepts.hidden": [16], "concepts.epochs": 3,
        "fusion.projDim": 8, "pyramid.levels": 1, "resize.length": 16,
        "model.dim": 16, "model.ffnDim": 16, "encoder.layers": 1, "decoder.layers": 1,
        "attention.heads": 2, "attention.points": 2, "queries.count": 4,
        "caption.embedDim": 8, "caption.hiddenDim": 8, "epochs": 2
    });
    for (k, v) in small.as_object().unwrap() {
        config[k] = v.clone();
    }
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

#[test]
fn synthetic_output_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    dvc_ok(&["make-synthetic", "--out", s(&a), "--seed", "4", "--videos", "3"]);
    dvc_ok(&["make-synthetic", "--out", s(&b), "--seed", "4", "--videos", "3"]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let refused = dvc(&["make-synthetic", "--out", s(&a), "--seed", "5", "--videos", "3"]);
    assert_eq!(refused.status.code(), Some(1));
    assert_eq!(error_json(&refused)["error"], "argument");
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    dvc_ok(&["make-synthetic", "--out", s(&a), "--seed", "5", "--videos", "3", "--force"]);
    assert_ne!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn config_errors_list_every_bad_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"model.dimm": 3, "epochs": -1, "fusion.mode": "middle"}"#).unwrap();
    let out = dvc(&["train", "--config", s(&config), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    let message = err["message"].as_str().unwrap();
    for key in ["model.dimm", "epochs", "fusion.mode"] {
        assert!(message.contains(key), "{key} missing from {message}");
    }
}

#[test]
fn usage_errors_are_json_with_exit_one() {
    let out = dvc(&["train", "--config", "x.json", "--out", "y", "--max-events", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "usage");
    let out = dvc(&["train", "--config", "x.json", "--out", "y", "--fusion", "middle"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_concept_checkpoint_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_dataset(tmp.path());
    let out = dvc(&["train", "--config", s(&config), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "argument");
}

#[test]
fn full_pipeline_and_snapshot_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = tiny_dataset(root);
    let manifest = root.join("data/manifest.json");
    let (concepts, ck) = (root.join("concepts"), root.join("ck"));

    dvc_ok(&["train-concepts", "--config", s(&config), "--out", s(&concepts)]);
    dvc_ok(&["train", "--config", s(&config), "--concepts", s(&concepts), "--out", s(&ck)]);
    let preds = root.join("out/preds.json");
    dvc_ok(&["predict", "--checkpoint", s(&ck), "--out", s(&preds)]);
    let report = root.join("out/report.json");
    let table = dvc_ok(&["evaluate", "--predictions", s(&preds), "--manifest", s(&manifest), "--out", s(&report)]);

    let predictions: Value = serde_json::from_str(&fs::read_to_string(&preds).unwrap()).unwrap();
    assert_eq!(predictions.as_object().unwrap().len(), 3);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["precision", "recall", "bleu4", "meteorExact", "cider"] {
        assert!(r[key].is_number(), "{key} missing");
    }
    assert!(String::from_utf8_lossy(&table.stdout).contains("M-exact"));
    assert!(root.join("out/report.txt").exists());
    assert!(root.join("out/report.config.json").exists());

    // retrain from the prediction snapshot and compare
    let snapshot = root.join("out/preds.config.json");
    let ck2 = root.join("ck2");
    dvc_ok(&["train", "--config", s(&snapshot), "--concepts", s(&concepts), "--out", s(&ck2)]);
    let preds2 = root.join("out2/preds.json");
    dvc_ok(&["predict", "--checkpoint", s(&ck2), "--manifest", s(&manifest), "--out", s(&preds2)]);
    assert_eq!(fs::read(&preds).unwrap(), fs::read(&preds2).unwrap());
}

#[test]
fn ablation_flags_and_seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = tiny_dataset(root);
    let ck = |name: &str| root.join(name);
    let saved =
        |dir: &Path| -> Value { serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap() };

    for fusion in ["early", "late"] {
        let out = ck(&format!("fusion-{fusion}"));
        dvc_ok(&[
            "train",
            "--config",
            s(&config),
            "--no-concepts",
            "--fusion",
            fusion,
            "--set",
            "epochs=1",
            "--out",
            s(&out),
        ]);
        assert_eq!(saved(&out)["fusion.mode"], fusion);
    }
    for k in ["3", "5", "7", "10"] {
        let out = ck(&format!("events-{k}"));
        dvc_ok(&[
            "train",
            "--config",
            s(&config),
            "--no-concepts",
            "--no-classification",
            "--max-events",
            k,
            "--set",
            "epochs=1",
            "--out",
            s(&out),
        ]);
        let c = saved(&out);
        assert_eq!(c["counter.maxEvents"], k.parse::<u64>().unwrap());
        assert_eq!(c["classification.enabled"], false);
        assert_eq!(c["concepts.enabled"], false);
    }

    let run = |env_seed: Option<&str>, flag: Option<&str>, name: &str| -> Value {
        let out = ck(name);
        let mut args = vec!["train", "--config", s(&config), "--no-concepts", "--set", "epochs=1", "--out", s(&out)];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dvc"));
        cmd.args(&args).env("RUST_LOG", "warn").env_remove("DVC_SEED");
        if let Some(e) = env_seed {
            cmd.env("DVC_SEED", e);
        }
        let status = cmd.output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        saved(&out)["seed"].clone()
    };
    assert_eq!(run(None, None, "seed-file"), 0);
    assert_eq!(run(Some("11"), None, "seed-env"), 11);
    assert_eq!(run(Some("11"), Some("12"), "seed-flag"), 12);
}
