use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gsclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsclip")).args(args).output().expect("failed to launch gsclip")
}

fn ok(args: &[&str]) -> Output {
    let out = gsclip(args);
    assert!(out.status.success(), "gsclip {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_config(dir: &Path, train: &[&str], test: &[&str]) -> PathBuf {
    let cfg = json!({
        "seed": 3,
        "data": { "train_categories": train, "test_categories": test, "per_category": 3, "test_per_category": 4, "points": 300 },
        "encoder": { "image": 48, "depth": 1, "dim": 16, "point_dim": 16, "point_global_dim": 24, "heads": 2 },
        "projection": { "views": 3, "height": 48, "width": 48, "splat_radius": 1.5 },
        "stage1": { "epochs": 2, "learning_rate": 0.002, "batch_size": 2 },
        "stage2": { "epochs": 2, "learning_rate": 0.0005, "batch_size": 2 }
    });
    let path = dir.join(format!("{}.json", test.join("_")));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_and_render_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["sphere", "torus"], &["cube"]);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let before = snapshot(&data);

    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    for f in ["config.json", "checkpoints/stage1.safetensors", "checkpoints/stage2.safetensors", "logs/metrics.jsonl"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("logs/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4, "two epochs per stage");

    let ck = run.join("checkpoints/stage2.safetensors");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    let first = fs::read(run.join("metrics.json")).unwrap();
    let fresh = tmp.path().join("fresh");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&fresh)]);
    assert_eq!(first, fs::read(fresh.join("metrics.json")).unwrap(), "evaluation is not reproducible");
    let metrics: Value = serde_json::from_slice(&first).unwrap();
    assert!(metrics["metrics"]["per_category"]["cube"].is_object());

    ok(&["render-maps", "--checkpoint", s(&ck), "--data", s(&data)]);
    let summary: Value = serde_json::from_slice(&fs::read(run.join("maps/summary.json")).unwrap()).unwrap();
    let ids: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(ids.len(), 2, "one normal and one anomalous object");
    for id in ids {
        assert!(run.join(format!("maps/{id}_view0.png")).is_file());
        assert!(run.join(format!("maps/{id}_scores.ply")).is_file());
    }

    // stage 2 alone resumes from the stage-1 checkpoint
    let resumed = tmp.path().join("resumed");
    ok(&[
        "train",
        "--stage",
        "2",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--checkpoint",
        s(&run.join("checkpoints/stage1.safetensors")),
    ]);
    assert_eq!(
        fs::read(resumed.join("checkpoints/stage2.safetensors")).unwrap(),
        fs::read(&ck).unwrap(),
        "resumed stage 2 differs from the combined run"
    );

    assert_eq!(before, snapshot(&data), "a subcommand modified the dataset directory");
}

#[test]
fn overlapping_categories_exit_with_protocol_code() {
    let tmp = tempfile::tempdir().unwrap();
    let overlap = tiny_config(tmp.path(), &["sphere", "torus"], &["sphere"]);
    let out = gsclip(&["gen-data", "--config", s(&overlap), "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // a model trained on spheres must not be evaluated on spheres
    let cfg = tiny_config(tmp.path(), &["sphere", "torus"], &["cube"]);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--stage", "1", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let other = tiny_config(tmp.path(), &["cylinder", "cube"], &["sphere"]);
    let other_data = tmp.path().join("other");
    ok(&["gen-data", "--config", s(&other), "--out", s(&other_data)]);
    let ck = run.join("checkpoints/stage1.safetensors");
    let out = gsclip(&["eval", "--checkpoint", s(&ck), "--data", s(&other_data)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol violation"));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gsclip(&["config", "--set", "scoring.no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gsclip(&["config", "--temperature", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gsclip(&["eval", "--checkpoint", s(&tmp.path().join("missing.safetensors")), "--data", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["sphere"], &["cube"]);
    let out = ok(&["config", "--config", s(&cfg), "--views", "5", "--set", "scoring.sigma=2.5"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["projection"]["views"], 5);
    assert_eq!(v["projection"]["height"], 48);
    assert_eq!(v["scoring"]["sigma"], 2.5);
    assert_eq!(v["seed"], 3);

    // TOML output loads back to the same config
    let toml_path = tmp.path().join("c.toml");
    ok(&["config", "--config", s(&cfg), "--out", s(&toml_path)]);
    let again = ok(&["config", "--config", s(&toml_path)]);
    let plain = ok(&["config", "--config", s(&cfg)]);
    assert_eq!(again.stdout, plain.stdout);
}
