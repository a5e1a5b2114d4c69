use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fmtt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmtt")).args(args).env("FMTT_THREADS", "1").output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(cmd: &str, config: &Path, out: &Path) -> Value {
    let o = fmtt(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn small_linear(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(configs().join("linear_1d.toml"))
        .unwrap()
        .replace("repeats = 16", "repeats = 3")
        .replace("steps = 200", "steps = 40")
        .replace("particles = 128", "particles = 32");
    let file = dir.join("linear.toml");
    fs::write(&file, text).unwrap();
    file
}

#[test]
fn sample_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_linear(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = run("sample", &config, &a);
    run("sample", &config, &b);
    for file in ["summary.json", "diagnostics.csv", "runs/000/trace.csv", "runs/002/diagnostics.csv", "config_resolved.toml"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(summary["oracle_kind"], "closed_form");
    assert_eq!(summary["oracle_mean"], 0.5);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_linear(dir.path());
    let a = run("sample", &config, &dir.path().join("a"));
    let out = dir.path().join("b");
    let o = fmtt(&["sample", "--config", config.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let b: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(b["seed"], 5);
    assert_ne!(a["tilted_mean"], b["tilted_mean"]);
}

#[test]
fn zero_reward_has_no_discrepancy() {
    let dir = tempfile::tempdir().unwrap();
    let s = run("sample", &configs().join("zero_reward.toml"), dir.path());
    assert_eq!(s["D_total"], 0.0);
    assert_eq!(s["Lambda"], 0.0);
    assert_eq!(s["quality_ratio_defined"], false);
}

#[test]
fn invalid_config_writes_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[problem.target]\nweights = [1.0]\nmeans = [[0.0]]\ncovariances = [[[1.0]]]\n[run]\nparticles = 0\n").unwrap();
    let out = dir.path().join("out");
    let o = fmtt(&["sample", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "error");
    assert!(report["kind"].is_string());

    fs::write(&config, "seed = 0\nbogus = 1\n").unwrap();
    let o = fmtt(&["sample", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(report["kind"], "parse");
}

#[test]
fn refined_schedule_feeds_the_next_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("diagnose");
    let summary = run("diagnose", &configs().join("asymmetric.toml"), &first);
    assert_eq!(summary["flat_barrier"], false);
    let schedule = first.join("schedule_refined.toml");
    assert!(first.join("barrier.csv").exists());

    let text = fs::read_to_string(configs().join("asymmetric.toml"))
        .unwrap()
        .replace("steps = 50", &format!("times_file = {:?}", schedule.to_str().unwrap()));
    let config = dir.path().join("refined.toml");
    fs::write(&config, text).unwrap();
    let second = run("sample", &config, &dir.path().join("sample"));
    let before = summary["D_total"].as_f64().unwrap();
    let after = second["D_total"].as_f64().unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn refine_writes_every_round() {
    let dir = tempfile::tempdir().unwrap();
    let s = run("refine", &configs().join("asymmetric.toml"), dir.path());
    let rounds = s["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 4);
    for r in 0..4 {
        assert!(dir.path().join(format!("round_{r}/schedule.toml")).exists());
    }
    assert!(rounds[1]["D_total"].as_f64() < rounds[0]["D_total"].as_f64());
}

#[test]
fn verify_single_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = fmtt(&["verify", "--only", "interpolant", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("interpolant"));
}
