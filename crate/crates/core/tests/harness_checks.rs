//! The invariant checkers reject corrupted snapshots, and trace reports
//! survive a render/parse cycle.

use std::path::{Path, PathBuf};

use ssmmp::harness::invariants::{
    check_conservation, check_dns, check_isolation, check_message_asymmetry,
    check_port_exclusivity, sweep,
};
use ssmmp::harness::random::{random_scenario, RandomShape};
use ssmmp::harness::{load_scenario, run_scenario, SimCluster, Snapshot, TraceReport};
use ssmmp::manager::{AgentStatus, InstanceState};
use ssmmp::wire::{samples, FieldName as F, MessageType as T};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

/// kill_agent at 800 ms: one session from A#1 to B#1 is established.
fn held_session() -> Snapshot {
    let scenario = load_scenario(&fixture("kill_agent.scn")).unwrap();
    let timeline = scenario.timeline.clone();
    let mut cluster = SimCluster::new(scenario, 2);
    for ev in timeline.iter().take_while(|e| e.at <= 800) {
        cluster.advance_to(ev.at);
        assert!(cluster.apply(&ev.event), "{}", ev.event);
    }
    let snap = cluster.snapshot();
    for (inv, outcome) in sweep(&snap) {
        assert!(outcome.is_ok(), "{inv}: {outcome:?}");
    }
    assert_eq!(snap.channels.len(), 1);
    snap
}

#[test]
fn duplicated_session_breaks_conservation() {
    let mut s = held_session();
    let dup = s
        .sessions
        .iter()
        .find(|r| r.state == ssmmp::manager::SessionState::Established)
        .unwrap()
        .clone();
    s.sessions.push(dup);
    assert!(check_conservation(&s).is_err());
}

#[test]
fn dropped_channel_breaks_conservation() {
    let mut s = held_session();
    s.channels.clear();
    assert!(check_conservation(&s).is_err());
}

#[test]
fn duplicated_bound_port_breaks_exclusivity() {
    let mut s = held_session();
    let first = s.bound_ports[0];
    s.bound_ports.push(first);
    assert!(check_port_exclusivity(&s).is_err());
}

#[test]
fn duplicated_manager_port_breaks_exclusivity() {
    let mut s = held_session();
    let inst = s
        .instances
        .iter()
        .find(|i| !i.4.is_empty())
        .unwrap()
        .clone();
    s.instances
        .push((inst.0, inst.1 + 100, inst.2, inst.3, inst.4));
    assert!(check_port_exclusivity(&s).is_err());
}

#[test]
fn forbidden_fields_break_asymmetry() {
    let source_side = samples::all()
        .into_iter()
        .find(|m| m.msg_type == T::SessionRequest)
        .unwrap();
    assert!(check_message_asymmetry(&source_side).is_ok());
    assert!(check_message_asymmetry(&source_side.with(F::DestServiceInstanceId, 1)).is_err());

    let dest_side = samples::all()
        .into_iter()
        .find(|m| m.msg_type == T::DestCloseInfo)
        .unwrap();
    assert!(check_message_asymmetry(&dest_side).is_ok());
    assert!(check_message_asymmetry(&dest_side.with(F::SourceServiceName, "A")).is_err());
}

#[test]
fn record_for_non_gateway_breaks_dns() {
    let mut s = held_session();
    let (svc, id, node, ..) = s
        .instances
        .iter()
        .find(|i| !s.gateways.contains(&i.0))
        .unwrap()
        .clone();
    s.dns_a.push((format!("{svc}-{id}"), node.ip()));
    assert!(check_dns(&s).is_err());
}

#[test]
fn dangling_alias_breaks_dns() {
    let mut s = held_session();
    s.dns_cname.push(("ghost".into(), vec!["nowhere-1".into()]));
    assert!(check_dns(&s).is_err());
}

#[test]
fn isolated_node_with_instance_breaks_isolation() {
    let mut s = held_session();
    let host = s
        .instances
        .iter()
        .find(|i| i.3 == InstanceState::Running)
        .map(|i| i.2)
        .unwrap();
    for (node, status) in &mut s.agents {
        if *node == host {
            *status = AgentStatus::Isolated;
        }
    }
    assert!(check_isolation(&s).is_err());
}

fn assert_roundtrip(report: &TraceReport) {
    let text = report.render();
    let parsed = TraceReport::parse(&text).unwrap_or_else(|e| panic!("{}: {e:?}", report.scenario));
    assert_eq!(parsed.render(), text, "{}", report.scenario);
}

#[test]
fn fixture_reports_roundtrip() {
    for name in ["fig1_boot.scn", "kill_agent.scn", "idle_reap.scn"] {
        let scenario = load_scenario(&fixture(name)).unwrap();
        let seed = scenario.seed.unwrap_or(0);
        assert_roundtrip(&run_scenario(scenario, seed));
    }
}

#[test]
fn random_reports_roundtrip() {
    let shape = RandomShape {
        failures: true,
        ..RandomShape::default()
    };
    for seed in 0..20 {
        assert_roundtrip(&run_scenario(random_scenario(seed, shape), seed));
    }
}
