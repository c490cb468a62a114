//! End-to-end CLI workflow on a small blob config: every subcommand in
//! pipeline order, plus the exit-code contract.

use std::path::Path;
use std::process::Command;

fn trapnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trapnet"))
}

const CONFIG: &str = "
[experiment]
master_seed = 4242
model = mlp:24

[data]
source = blobs
classes = 4
dim = 16
per_class = 150
test_per_class = 100

[defense]
labels = 1
variant = single_square
kappa = 0.6
injection_ratio = 0.5
side = 1

[training]
epochs = 12
batch = 16
lr = 0.005

[detector]
fpr = 0.05

[attack.pgd]
eps = 40
iterations = 30
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("experiment.cfg");
    let text = format!("{CONFIG}\n[experiment]\noutput_dir = {}\n", dir.join("out").display());
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_in_stage_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");

    for (stage, artifact) in [
        ("train-clean", "clean.bundle"),
        ("train-trapdoor", "trapdoored.bundle"),
        ("calibrate", "detector.bundle"),
        ("attack", "attacks.jsonl"),
        ("detect", "detections.jsonl"),
        ("evaluate", "report.json"),
        ("report", "report.json"),
    ] {
        let result = trapnet()
            .arg(stage)
            .arg("--config")
            .arg(&config)
            .output()
            .unwrap();
        let stdout = String::from_utf8_lossy(&result.stdout);
        let stderr = String::from_utf8_lossy(&result.stderr);
        assert!(
            result.status.success(),
            "{stage} failed\nstdout: {stdout}\nstderr: {stderr}"
        );
        assert!(
            stdout.lines().count() == 1 && stdout.contains(stage.split('-').next().unwrap()),
            "{stage} should print a one-line summary, got: {stdout}"
        );
        assert!(out.join(artifact).exists(), "{stage} should write {artifact}");
    }

    // the evaluate stage also emits csv artifacts
    assert!(out.join("report.csv").exists());
    assert!(out.join("distributions.csv").exists());
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("task_id,attack,"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["master_seed"], 4242);
    assert!(report["attacks"][0]["attack_success"].as_f64().unwrap() >= 0.0);

    // attack records are one JSON object per line
    let jsonl = std::fs::read_to_string(out.join("attacks.jsonl")).unwrap();
    for line in jsonl.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["attack"], "pgd");
        assert!(record["x_adv"].as_array().unwrap().len() == 16);
    }
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let result = trapnet().arg("frobnicate").output().unwrap();
    assert_eq!(result.status.code(), Some(1));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&result.stdout),
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(text.to_lowercase().contains("usage"), "{text}");
}

#[test]
fn unknown_flag_exits_one() {
    let result = trapnet()
        .args(["train-clean", "--no-such-flag", "x"])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_one() {
    let result = trapnet()
        .args(["train-clean", "--config", "/nonexistent/path.cfg"])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn config_without_master_seed_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[experiment]\noutput_dir = out\n").unwrap();
    let result = trapnet()
        .args(["train-clean", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("master_seed"));
}

#[test]
fn evaluate_before_calibrate_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    // train-clean first so evaluate fails on the missing detector artifact
    assert!(trapnet()
        .args(["train-clean", "--config"])
        .arg(&config)
        .output()
        .unwrap()
        .status
        .success());
    let result = trapnet()
        .args(["evaluate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("calibrate"), "{stderr}");
}

#[test]
fn output_dir_env_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let override_dir = dir.path().join("elsewhere");
    let result = trapnet()
        .args(["train-clean", "--config"])
        .arg(&config)
        .env("TRAPNET_OUT", &override_dir)
        .output()
        .unwrap();
    assert!(result.status.success());
    assert!(override_dir.join("clean.bundle").exists());
    assert!(!dir.path().join("out").join("clean.bundle").exists());
}
