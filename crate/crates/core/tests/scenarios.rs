use std::path::PathBuf;

use ssmmp::harness::{run_scenario_file, TraceReport};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(name: &str) -> TraceReport {
    run_scenario_file(&fixture(name), None, false).unwrap()
}

fn summary(r: &TraceReport) -> String {
    let text = r.render();
    let keep: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with("event ") && !l.starts_with("msg "))
        .collect();
    keep.join("\n")
}

#[test]
fn fig1_boot_passes() {
    let r = run("fig1_boot.scn");
    assert!(r.passed(), "{}", summary(&r));
}

#[test]
fn kill_agent_passes() {
    let r = run("kill_agent.scn");
    assert!(r.passed(), "{}", summary(&r));
}

#[test]
fn fig1_boot_over_tcp() {
    let r = run_scenario_file(&fixture("fig1_boot.scn"), None, true).unwrap();
    println!("{}", r.render());
    assert!(r.passed(), "{}", summary(&r));
}

#[test]
fn idle_reap_passes() {
    let r = run("idle_reap.scn");
    assert!(r.passed(), "{}", summary(&r));
}

#[test]
fn baas_is_never_replicated() {
    let r = run("baas_single.scn");
    assert!(r.passed(), "{}", summary(&r));
    let started = r
        .render()
        .lines()
        .filter(|l| l.starts_with("instance BaaS-1 "))
        .count();
    assert_eq!(started, 1, "{}", summary(&r));
}
