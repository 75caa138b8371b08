use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"source": "synth", "spec": {"length": 400, "seed": 1, "channels": [
    {"components": [{"freq": 0.05, "amp": 1.0}], "noise": 0.05}]}},
  "task": {"kind": "forecast", "horizon": 8},
  "split": {"window": 16, "stride": 4},
  "sdaq": {"lambda": 8, "mus": [0.7, 0.9], "backend": "fft", "wavelet": "haar"},
  "patch": {"patch_len": 4, "token_dim": 8, "position": true},
  "layers": 2, "ffn_hidden": 16, "epochs": 2, "batch_size": 8
}"#;

fn pets(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pets"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), config).unwrap();
    dir
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_eval_export_round_trip() {
    let dir = setup(TINY);
    let d = dir.path();
    let t = json(&pets(d, &["train", "--config", "run.json", "--out", "o", "--epochs", "3"]));
    assert_eq!(t["epochs"], 3);
    assert_eq!(fs::read_to_string(d.join("o/train_log.jsonl")).unwrap().lines().count(), 3);

    let e = json(&pets(d, &["eval", "--config", "run.json", "--out", "o", "--predictions"]));
    assert!(e["mse"].as_f64().unwrap() >= 0.0);
    let metrics = fs::read(d.join("o/metrics.json")).unwrap();
    json(&pets(d, &["eval", "--config", "run.json", "--out", "o"]));
    assert_eq!(metrics, fs::read(d.join("o/metrics.json")).unwrap());
    assert!(d.join("o/predictions.csv").exists());

    let a = json(&pets(d, &["export-attention", "--config", "run.json", "--out", "o", "--sample", "0"]));
    assert_eq!(a["files"].as_array().unwrap().len(), 2);
    assert!(d.join("o/attention/layer2.csv").exists());
}

#[test]
fn decompose_honours_backend_flag() {
    let dir = setup(TINY);
    let d = dir.path();
    let r = json(&pets(d, &["decompose", "--config", "run.json", "--out", "dec", "--backend", "fft"]));
    assert!(r["reconstruction_error"].as_f64().unwrap() <= 1e-9);
    for k in 1..=3 {
        assert!(d.join(format!("dec/pattern{k}.csv")).exists());
    }
    json(&pets(d, &["decompose", "--config", "run.json", "--out", "cwt", "--backend", "cwt"]));
    assert_ne!(
        fs::read(d.join("dec/pattern3.csv")).unwrap(),
        fs::read(d.join("cwt/pattern3.csv")).unwrap()
    );
}

#[test]
fn seed_and_task_flags_reach_the_run() {
    let dir = setup(TINY);
    let d = dir.path();
    json(&pets(d, &["train", "--config", "run.json", "--out", "a", "--seed", "1", "--epochs", "1"]));
    json(&pets(d, &["train", "--config", "run.json", "--out", "b", "--seed", "2", "--epochs", "1"]));
    assert_ne!(fs::read(d.join("a/best.json")).unwrap(), fs::read(d.join("b/best.json")).unwrap());

    json(&pets(d, &["train", "--config", "run.json", "--out", "imp", "--task", "impute", "--epochs", "1"]));
    let saved: Value = serde_json::from_slice(&fs::read(d.join("imp/config.json")).unwrap()).unwrap();
    assert_eq!(saved["task"]["kind"], "impute");
    assert_eq!(saved["seed"], 0);
}

#[test]
fn exit_codes() {
    let dir = setup(TINY);
    let d = dir.path();
    assert_eq!(pets(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(pets(d, &["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(pets(d, &["--help"]).status.code(), Some(0));

    // configuration error
    fs::write(d.join("bad.json"), r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(pets(d, &["train", "--config", "bad.json"]).status.code(), Some(1));

    // data errors: missing files and out-of-range samples
    let out = pets(d, &["train", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    assert_eq!(pets(d, &["eval", "--config", "run.json", "--out", "none"]).status.code(), Some(2));
    json(&pets(d, &["train", "--config", "run.json", "--out", "o", "--epochs", "1"]));
    let out = pets(d, &["export-attention", "--config", "run.json", "--out", "o", "--sample", "9999"]);
    assert_eq!(out.status.code(), Some(2));

    // numerical failure writes the gradient dump
    let diverging = TINY.replace("\"epochs\": 2", "\"epochs\": 2, \"lr\": 1e300, \"clip_norm\": null");
    fs::write(d.join("nan.json"), diverging).unwrap();
    let out = pets(d, &["train", "--config", "nan.json", "--out", "nan"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("nan/grad_norms.json").exists());
}
