use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cavsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavsim")).args(args).output().unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn plot_of_missing_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = cavsim(&["plot", "--run", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn local_client_count_must_match_vehicles() {
    let dir = tempfile::tempdir().unwrap();
    let out = cavsim(&[
        "run",
        "--scenario",
        scenario("close_spawn_4.yaml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--local-clients",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "world:\n  max_ticks: -4\nvehicles: []\n").unwrap();
    let out = cavsim(&["run", "--scenario", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn sequential_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = cavsim(&[
        "run",
        "--scenario",
        scenario("close_spawn_4_inject250.yaml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--run-id",
        "r",
        "--sequential",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.json", "traffic.csv", "event_log.jsonl"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }
    let replot = cavsim(&["plot", "--run", dir.path().join("r").to_str().unwrap()]);
    assert!(replot.status.success());
}
