use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssmmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmmp"))
        .args(args)
        .output()
        .expect("spawn ssmmp")
}

fn fixture(name: &str) -> String {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    p.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_accepts_fig1() {
    let o = ssmmp(&["validate", &fixture("fig1.graph")]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("ok:"));
}

#[test]
fn validate_rejects_cycle() {
    let o = ssmmp(&["validate", &fixture("cyclic.graph")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("error:"));
}

#[test]
fn missing_file_is_an_error() {
    let o = ssmmp(&["validate", "/nonexistent/graph"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn conformance_regenerates_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = ssmmp(&["conformance", d, "--regen"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("31 files, 31 passes"));

    let victim = std::fs::read_dir(dir.path())
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let text = std::fs::read_to_string(&victim).unwrap();
    std::fs::write(&victim, text.replacen(": ", ":", 1)).unwrap();
    let o = ssmmp(&["conformance", d]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn run_then_trace() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("kill_agent.report");
    let r = report.to_str().unwrap();
    let o = ssmmp(&["run", &fixture("kill_agent.scn"), "--seed", "2", "-o", r]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).trim(), "result pass");

    let by_session = ssmmp(&["trace", r, "--session", "1"]);
    assert!(by_session.status.success());
    let text = stdout(&by_session);
    assert!(text.contains("type: session_request"), "{text}");
    assert!(!text.trim_end().ends_with(" 0 message(s)"));

    let by_instance = ssmmp(&["trace", r, "--instance", "B:1"]);
    assert!(by_instance.status.success());
    assert!(!stdout(&by_instance).trim_end().ends_with(" 0 message(s)"));

    let bad = ssmmp(&["trace", r, "--instance", "B"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_is_deterministic() {
    let a = ssmmp(&["run", &fixture("fig1_boot.scn"), "--seed", "7"]);
    let b = ssmmp(&["run", &fixture("fig1_boot.scn"), "--seed", "7"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}
