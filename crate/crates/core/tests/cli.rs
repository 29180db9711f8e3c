//! The `asu` binary as a user sees it.

use std::fs;
use std::path::Path;
use std::process::Command;

fn asu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asu"))
}

fn smoke(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("smoke.json");
    fs::write(&p, include_str!("../configs/smoke.json")).unwrap();
    p
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let out = asu().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn gen_data_is_reproducible_and_records_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("d{k}"));
        let s = asu().args(["gen-data", "--seed", "11", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert_eq!(s.code(), Some(0));
        runs.push((fs::read(out.join("corpus.jsonl")).unwrap(), fs::read(out.join("vocab.txt")).unwrap(), fs::read(out.join("manifest.json")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let m: serde_json::Value = serde_json::from_slice(&runs[0].2).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["corpus_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_with_missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("out").join("report.json");
    let s = asu()
        .args(["eval", "--model"])
        .arg(dir.path().join("nope.ckpt"))
        .arg("--corpus")
        .arg(dir.path())
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn verify_lemmas_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l");
    let o = asu().args(["verify-lemmas", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["passed"], true);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn train_unlearn_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let d = dir.path();
    assert_eq!(asu().arg("train").arg("--config").arg(&cfg).arg("--out").arg(d.join("base")).status().unwrap().code(), Some(0));
    assert_eq!(
        asu().arg("train").arg("--retain-only").arg("--config").arg(&cfg).arg("--out").arg(d.join("retrain")).status().unwrap().code(),
        Some(0)
    );
    let s = asu()
        .args(["unlearn", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--base")
        .arg(d.join("base/model.ckpt"))
        .arg("--out")
        .arg(d.join("u"))
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(0));
    for f in ["model.ckpt", "losses.csv", "metrics.json", "metrics_pre.json", "forget_records.csv", "retain_records.csv", "manifest.json"] {
        assert!(d.join("u").join(f).is_file(), "{f}");
    }
    let losses = fs::read_to_string(d.join("u/losses.csv")).unwrap();
    assert!(losses.starts_with(asu::runner::LOSS_CSV_HEADER));
    let records = fs::read_to_string(d.join("u/forget_records.csv")).unwrap();
    assert!(records.starts_with(asu::metrics::RECORD_CSV_HEADER));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("u/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);

    let s = asu()
        .args(["eval", "--privleak", "--model"])
        .arg(d.join("u/model.ckpt"))
        .arg("--corpus")
        .arg(d.join("base/corpus"))
        .arg("--out")
        .arg(d.join("e/report.json"))
        .arg("--retrain")
        .arg(d.join("retrain/model.ckpt"))
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e/report.json")).unwrap()).unwrap();
    assert!(r["privleak"].is_number());
    assert!(r["mu"].as_f64().unwrap() >= 0.0);
}

#[test]
fn no_subcommand_writes_outside_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let before: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    asu().arg("gen-data").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("only")).status().unwrap();
    let after: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(after.len(), before.len() + 1);
    assert_eq!(fs::read(&cfg).unwrap(), include_bytes!("../configs/smoke.json"));
}
