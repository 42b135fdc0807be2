//! End-to-end runs of the `spikelab` binary at toy sizes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spikelab"));
    c.env("SPIKELAB_THREADS", "1");
    c
}

fn scratch(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("spikelab-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const TOY: [&str; 14] = [
    "--d",
    "30",
    "--epochs",
    "40",
    "--iters",
    "60",
    "--mc",
    "500",
    "--test-samples",
    "500",
    "--downstream-pairs",
    "50",
    "--m-batch",
    "5",
];

fn sweep(out: &Path) -> Output {
    ok(bin()
        .args(["sweep", "--alpha", "1..6", "--activation", "linear,relu", "--seeds", "5"])
        .args(TOY)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap())
}

fn count(csv: &str, provenance: &str) -> usize {
    csv.lines().skip(1).filter(|l| l.split(',').next() == Some(provenance)).count()
}

#[test]
fn sweep_rows_and_byte_identical_rerun() {
    let (a, b) = (scratch("sweep-a"), scratch("sweep-b"));
    sweep(&a);
    let csv = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    // 11 alphas × 2 activations × 5 seeds, plus one theory row per alpha and activation
    assert_eq!(count(&csv, "simulation"), 110);
    assert_eq!(count(&csv, "theory-rs"), 22);
    assert!(csv.lines().next().unwrap().ends_with("config_hash,code_version"));

    sweep(&b);
    let again = std::fs::read_to_string(b.join("sweep.csv")).unwrap();
    assert_eq!(csv, again);
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}

#[test]
fn config_file_with_flag_override() {
    let dir = scratch("config");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"alpha": [2.0, 3.0], "activations": ["linear"], "d": 25, "epochs": 30}"#).unwrap();
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--alpha", "4", "--seeds", "2"])
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap());
    let body: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/config.json")).unwrap()).unwrap();
    let written = &body["config"];
    assert_eq!(written["alpha"], serde_json::json!([4.0]));
    assert_eq!(written["d"], 25);
    assert_eq!(written["seeds"], serde_json::json!([0, 1]));
    let runs = std::fs::read_to_string(dir.join("run/train_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn invalid_field_exits_with_code_2() {
    let dir = scratch("invalid");
    let out = bin().args(["train", "--d", "0"]).arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`d`"));

    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"alpha": [2.0], "no_such_field": 1}"#).unwrap();
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    let _ = std::fs::remove_dir_all(&dir);
}
