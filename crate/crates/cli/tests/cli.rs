use std::path::Path;
use std::process::Command;

fn otasim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_otasim"))
}

fn run_into(dir: &Path, seed: &str) {
    let status = otasim().args(["run", "--seed", seed, "--out"]).arg(dir).status().unwrap();
    assert!(status.success());
}

#[test]
fn run_writes_outputs_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into(a.path(), "5");
    run_into(b.path(), "5");
    for file in ["report.json", "trace.jsonl", "cycles.csv", "registry.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        assert!(!x.is_empty(), "{file}");
        assert_eq!(x, std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn fold_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), "9");
    let out = otasim().args(["fold", "--trace"]).arg(dir.path().join("trace.jsonl")).output().unwrap();
    assert!(out.status.success());
    assert_eq!(out.stdout, std::fs::read(dir.path().join("report.json")).unwrap());
}

#[test]
fn bad_script_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.json");
    std::fs::write(
        &script,
        r#"{"name":"bad","duration_min":10,"cycle_min":1,"events":[{"at_min":3,"action":"stop","instances":["backserver-7"]}]}"#,
    )
    .unwrap();
    let validate = otasim().args(["validate", "--script"]).arg(&script).output().unwrap();
    assert_eq!(validate.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&validate.stderr).contains("backserver-7"));
    let run = otasim().args(["run", "--script"]).arg(&script).arg("--out").arg(dir.path().join("o")).status().unwrap();
    assert_eq!(run.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn validate_accepts_builtin() {
    let out = otasim().args(["validate", "--script", "builtin"]).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn missing_script_file_is_an_error() {
    let out = otasim().args(["validate", "--script", "/nonexistent/script.json"]).output().unwrap();
    assert!(!out.status.success());
}
