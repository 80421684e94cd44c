//! The `ata` binary: exit codes and machine-readable output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn ata(state: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ata"))
        .arg("--state-dir")
        .arg(state)
        .args(args)
        .env_remove("ATA_LLM_API_KEY")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn synthetic(dir: &Path, extra: &str) -> String {
    write(
        dir,
        "run.yaml",
        &format!("backend: synthetic\nscenario: \"{}\"\nseed: 7\ninitial_budget: 10\n{extra}", scenarios().join("h1.yaml").display()),
    )
}

#[test]
fn converged_run_exits_zero_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let cfg = synthetic(dir.path(), "");
    let o = ata(&state, &["run", "--config", &cfg, "--run-id", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Converged after 2 iteration(s)"));

    let o = ata(&state, &["report", "--run", "a", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["termination_reason"], "Converged");
    assert_eq!(v["iterations"].as_array().unwrap().len(), 2);

    let o = ata(&state, &["replay", "--run", "a", "--iteration", "1", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["matches"], true);

    // the same id cannot be reused
    assert_eq!(code(&ata(&state, &["run", "--config", &cfg, "--run-id", "a"])), 3);
}

#[test]
fn default_run_ids_do_not_collide() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let cfg = synthetic(dir.path(), "");
    assert_eq!(code(&ata(&state, &["run", "--config", &cfg])), 0);
    assert_eq!(code(&ata(&state, &["run", "--config", &cfg])), 0);
    assert!(state.join("runs/h1-s7/run.json").exists());
    assert!(state.join("runs/h1-s7-2/run.json").exists());
}

#[test]
fn exhausted_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(dir.path(), "policy: {max_iterations: 1}\n");
    assert_eq!(code(&ata(&dir.path().join("s"), &["run", "--config", &cfg])), 2);
}

#[test]
fn operator_stop_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let control = write(dir.path(), "control.yaml", "stop: true\n");
    let cfg = synthetic(dir.path(), &format!("control: \"{control}\"\n"));
    assert_eq!(code(&ata(&dir.path().join("s"), &["run", "--config", &cfg])), 5);
    assert!(dir.path().join("control.yaml.applied-1").exists());
}

#[test]
fn invalid_configuration_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.yaml", "backend: template\npolicy: {coverage_threshold: 1.5, max_iterations: 0}\n");
    let o = ata(&dir.path().join("s"), &["validate", "--config", &cfg]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("coverage_threshold") && err.contains("max_iterations") && err.contains("project"), "{err}");
    assert_eq!(code(&ata(&dir.path().join("s"), &["run", "--config", &cfg])), 3);
    assert!(!dir.path().join("s/runs").exists());
}

#[test]
fn remote_backend_without_credential_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("calc/calc")).unwrap();
    write(dir.path(), "calc/calc/ops.py", "def add(a, b):\n    return a + b\n");
    write(
        dir.path(),
        "manifest.yaml",
        "schema_version: 1\nproject: calc\nunits:\n  - name: calc/ops.py\n    callables:\n      - name: add\n        params: [{name: a}, {name: b}]\n        examples:\n          - {inputs: [1, 2], returns: 3}\n",
    );
    let cfg = write(
        dir.path(),
        "remote.yaml",
        "backend: remote\nproject: calc\nmanifest: manifest.yaml\nremote: {endpoint: \"http://127.0.0.1:9/v1\"}\nsandbox: {command: [\"true\"]}\n",
    );
    let o = ata(&dir.path().join("s"), &["run", "--config", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ATA_LLM_API_KEY"));
}

#[test]
fn unstartable_runner_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("calc/calc")).unwrap();
    write(dir.path(), "calc/calc/ops.py", "def add(a, b):\n    return a + b\n");
    write(
        dir.path(),
        "manifest.yaml",
        "schema_version: 1\nproject: calc\nunits:\n  - name: calc/ops.py\n    callables:\n      - name: add\n        params: [{name: a}, {name: b}]\n        examples:\n          - {inputs: [1, 2], returns: 3}\n",
    );
    let cfg = write(
        dir.path(),
        "t.yaml",
        "project: calc\nmanifest: manifest.yaml\nsandbox: {command: [\"/nonexistent/runner\"]}\n",
    );
    let o = ata(&dir.path().join("s"), &["run", "--config", &cfg]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn unknown_run_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ata(dir.path(), &["report", "--run", "nope"])), 3);
    assert_eq!(code(&ata(dir.path(), &["replay", "--run", "nope", "--iteration", "1"])), 3);
}

#[test]
fn simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let band = scenarios().join("band.yaml").display().to_string();
    let args = ["simulate", "--scenario", band.as_str(), "--runs", "20", "--seed", "3", "--format", "json"];
    let a = ata(dir.path(), &args);
    let b = ata(dir.path(), &args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["runs"], 20);

    assert_eq!(code(&ata(dir.path(), &["simulate", "--scenario", &band, "--runs", "0"])), 3);
    let bad = write(dir.path(), "bad.yaml", "name: x\nunits: []\ninitial_suite: []\nrepair_probability: 2\n");
    assert_eq!(code(&ata(dir.path(), &["simulate", "--scenario", &bad])), 3);
}
