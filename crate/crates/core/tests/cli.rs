mod common;

use std::path::Path;
use std::process::{Command, Output};

fn dpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpp"))
        .args(args)
        .env_remove(dpp::scenario::SEED_ENV)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> String {
    common::fixture_path(name).to_str().unwrap().to_string()
}

#[test]
fn counts_table() {
    let text = stdout(&dpp(&[
        "counts", "--dpp", "1", "1", "--dpw", "1", "1", "--djkm", "3",
    ]));
    let messages = |scheme: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.starts_with(scheme))
            .map(|l| {
                l.split_whitespace()
                    .find(|w| w.chars().all(|c| c.is_ascii_digit()))
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(messages("dpw "), ["3"], "{text}");
    assert_eq!(messages("djkm"), ["8"], "{text}");
    assert!(messages("dpp ").contains(&"4".to_string()), "{text}");
}

#[test]
fn counts_as_json() {
    let out = stdout(&dpp(&["counts", "--djkm", "5", "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(out.contains("14"), "{v}");
}

#[test]
fn simulate_fig8b_transmits_six_pulses() {
    let text = stdout(&dpp(&["simulate", "--scenario", &fixture("fig8b")]));
    assert_eq!(text.lines().filter(|l| l.contains(",tx,")).count(), 6);
    // Active heard by 3 nodes, each Bilateral by the 2 other receivers; 2 pulses each
    assert_eq!(text.lines().filter(|l| l.contains(",rx,")).count(), 14);
}

#[test]
fn every_fixture_measures_cleanly() {
    for c in 'a'..='h' {
        let out = dpp(&[
            "measure",
            "--scenario",
            &fixture(&format!("fig8{c}")),
            "--strict",
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "fig8{c}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn out_dir_receives_named_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&dpp(&[
        "measure",
        "--scenario",
        &fixture("fig8a"),
        "--out",
        d,
    ]));
    stdout(&dpp(&[
        "solve",
        "--scenario",
        &fixture("fig8a"),
        "--out",
        d,
        "--format",
        "json",
    ]));
    let csv = std::fs::read_to_string(dir.path().join("measurements.csv")).unwrap();
    assert!(csv.starts_with("cycle,kind,x,y,z,p_or_q,value_s,value_m"));
    let sol: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("solution.json")).unwrap())
            .unwrap();
    assert!(sol["ground_truth_rms_m"].as_f64().unwrap() < 1e-6);
}

#[test]
fn empty_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, "").unwrap();
    let out = dpp(&["simulate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn unknown_field_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        "{\"dimensions\": 2,\n \"nodes\": [],\n \"bogus\": 1}",
    )
    .unwrap();
    let out = dpp(&["measure", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
}

fn noisy_scenario(dir: &Path) -> String {
    let mut s = common::fixture("fig8a");
    s.noise.timestamp_jitter_sd_s = Some(1e-10);
    s.noise.seed = Some(5);
    let path = dir.join("noisy.json");
    std::fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn seed_flag_and_environment_override_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = noisy_scenario(dir.path());
    let base = stdout(&dpp(&["simulate", "--scenario", &path]));
    let same = stdout(&dpp(&["simulate", "--scenario", &path, "--seed", "5"]));
    let flag = stdout(&dpp(&["simulate", "--scenario", &path, "--seed", "6"]));
    let env = Command::new(env!("CARGO_BIN_EXE_dpp"))
        .args(["simulate", "--scenario", &path])
        .env(dpp::scenario::SEED_ENV, "6")
        .output()
        .unwrap();
    assert_eq!(base, same);
    assert_ne!(base, flag);
    assert_eq!(stdout(&env), flag);
}

#[test]
fn strict_solve_fails_on_collinear_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("collinear.json");
    let text = r#"{"dimensions": 2, "nodes": [
        {"id": 1, "role": "bilateral", "position": [0, 0], "known_position": true},
        {"id": 2, "role": "bilateral", "position": [5, 0], "known_position": true},
        {"id": 3, "role": "bilateral", "position": [10, 0], "known_position": true},
        {"id": 4, "role": "passive", "position": [4, 3]}]}"#;
    std::fs::write(&path, text).unwrap();
    let p = path.to_str().unwrap();
    assert_eq!(dpp(&["solve", "--scenario", p]).status.code(), Some(0));
    let strict = dpp(&["solve", "--scenario", p, "--strict"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("node 4"));
}

#[test]
fn bounds_report_passes_on_small_run() {
    let out = stdout(&dpp(&[
        "bounds",
        "--scenario",
        &fixture("fig8e"),
        "--trials",
        "50",
        "--strict",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["trials"], 50);
    assert!(v["reports"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["passed"] == true));
}
