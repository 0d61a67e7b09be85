use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn rebafl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rebafl")).args(args).output().unwrap()
}

fn smoke() -> String {
    presets().join("synthetic_smoke.json").to_str().unwrap().to_owned()
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = rebafl(&["run", &smoke(), "--out", out.to_str().unwrap(), "--rounds", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "partition.json", "rounds.csv", "history.json", "accuracy.tsv", "checkpoint.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("final accuracy"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let rest = tmp.path().join("rest");
    let s = smoke();
    assert!(rebafl(&["run", &s, "--out", full.to_str().unwrap(), "--rounds", "8"]).status.success());
    assert!(rebafl(&["run", &s, "--out", part.to_str().unwrap(), "--rounds", "4"]).status.success());
    let ckpt = part.join("checkpoint.json");
    let o = rebafl(&["run", &s, "--out", rest.to_str().unwrap(), "--rounds", "8", "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(full.join("checkpoint.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(rest.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_rounds_is_an_empty_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let o = rebafl(&["run", &smoke(), "--out", out.to_str().unwrap(), "--rounds", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.trim_end(), "round,active_count,accuracy,diversity,skipped");
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(smoke()).unwrap().replace("\"p\": 0.7", "\"p\": -0.2");
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, text).unwrap();
    let o = rebafl(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dropout.p"));

    let o = rebafl(&["run", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(rebafl(&["run"]).status.code(), Some(1));
    assert_eq!(rebafl(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = rebafl(&["gradcheck", "--model", "cnn", "--loss", "rebafl"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));
    let o = rebafl(&["gradcheck", "--loss", "rbsm", "--epsilon", "0", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));
}

#[test]
fn sweep_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = rebafl(&[
        "sweep", &smoke(), "--param", "p", "--values", "0.3,1.0", "--rounds", "3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}
