use std::path::Path;
use std::process::{Command, Output};

use peampc::harness::{ExperimentConfig, Profile};

fn peampc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peampc"))
        .args(args)
        .env("PEAMPC_WORKERS", "1")
        .output()
        .expect("spawn peampc")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::example(Profile::Desk);
    edit(&mut cfg);
    let file = dir.join("config.json");
    std::fs::write(&file, serde_json::to_string(&cfg).unwrap()).unwrap();
    file
}

#[test]
fn short_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = peampc(&["run", "--controller", "alg2", "--seeds", "2", "--steps", "5", "--out", path(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["alg2/run_0.csv", "alg2/run_1.csv", "summary.json", "figures/volume_ratio.csv", "figures/epsilon.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("alg2/run_0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "header plus one row per step");
}

#[test]
fn invalid_window_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| c.window = 0);
    let out = dir.path().join("out");
    let res = peampc(&["--config", path(&cfg), "run", "--controller", "alg1", "--out", path(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("N_u"), "{stderr}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("failure.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
}

#[test]
fn compare_reports_three_controllers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = peampc(&["compare", "--seeds", "1", "--steps", "3", "--out", path(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let fig = std::fs::read_to_string(out.join("figures/volume_ratio.csv")).unwrap();
    assert_eq!(fig.lines().next(), Some("t,alg1,alg2,noisyK"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary["controllers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["controller"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["alg1", "alg2", "noisyK"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = peampc(&["--seed", "7", "run", "--controller", "alg1", "--seeds", "1", "--steps", "4", "--out", path(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let read = |d: &Path| std::fs::read(d.join("alg1/run_0.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn assumptions_pass_for_the_example() {
    let dir = tempfile::tempdir().unwrap();
    let res = peampc(&["check-assumptions", "--out", path(dir.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("assumptions.json")).unwrap()).unwrap();
    assert_eq!(report["all_passed"], true);
}

#[test]
fn synth_writes_terminal_ingredients() {
    let dir = tempfile::tempdir().unwrap();
    let res = peampc(&["synth", "--out", path(dir.path())]);
    assert!(res.status.success());
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("terminal.json")).unwrap()).unwrap();
    assert_eq!(t["normals"].as_array().unwrap().len(), t["offsets"].as_array().unwrap().len());
    assert_eq!(t["terminal_cost"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_pe_prints_json() {
    let res = peampc(&["verify-pe", "--rollouts", "500"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["lambda_min"].as_f64().unwrap() > 0.0);
    assert_eq!(v["rollouts"], 500);
}

#[test]
fn unknown_controller_is_rejected() {
    let res = peampc(&["run", "--controller", "alg3", "--out", "/tmp/unused"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("alg3"));
}
