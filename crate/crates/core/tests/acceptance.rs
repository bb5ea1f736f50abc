//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ssmmp::graph::{build_graph, AbstractConnection, GraphError, ServiceKind, ServiceSpec};
use ssmmp::harness::random::{random_scenario, RandomShape};
use ssmmp::harness::report::TraceEntry;
use ssmmp::harness::{
    load_scenario, run_scenario, run_scenario_tcp, Invariant, Scenario, SimCluster, TraceReport,
};
use ssmmp::manager::SessionState;
use ssmmp::transport::MsgDirection;
use ssmmp::wire::{golden, FieldName as F, MessageType as T, SubType as S};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> Scenario {
    load_scenario(&root().join("fixtures").join(name)).expect("fixture loads")
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:?}, limit {limit:?}")
    })
}

fn failed_lines(r: &TraceReport) -> String {
    let v: Vec<String> = r
        .verdicts
        .iter()
        .filter(|v| !v.passed)
        .map(|v| format!("{} {:?}", v.name, v.first))
        .chain(
            r.expects
                .iter()
                .filter(|e| !e.passed)
                .map(|e| format!("{} {}", e.text, e.detail)),
        )
        .collect();
    v.join("; ")
}

fn conformance() -> Outcome {
    let start = Instant::now();
    let results = golden::check(&root().join("conformance"));
    let elapsed = start.elapsed();
    let bad: Vec<String> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("{}: {e}", r.file)))
        .collect();
    ensure(results.len() >= 24, || {
        format!("only {} variants", results.len())
    })?;
    ensure(bad.is_empty(), || bad.join("; "))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{} golden files roundtrip", results.len()))
}

fn choreography() -> Outcome {
    let start = Instant::now();
    let r = run_scenario(fixture("fig1_boot.scn"), 1);
    ensure(r.passed(), || failed_lines(&r))?;
    let established: Vec<_> = r.sessions.iter().collect();
    ensure(established.len() == 1, || {
        format!("{} session records", established.len())
    })?;
    let rec = established[0];
    let id = rec.message_id;
    ensure(
        rec.params.len() == 11 && rec.params.iter().all(|(_, v)| v != "-"),
        || format!("incomplete record {:?}", rec.params),
    )?;
    let param = |name: &str| {
        rec.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    };
    let m: u16 = param("source_plug_port")
        .and_then(|v| v.parse().ok())
        .ok_or("no m")?;
    let l: u16 = param("dest_socket_new_port")
        .and_then(|v| v.parse().ok())
        .ok_or("no l")?;

    let expected = [
        (T::SessionRequest, S::ServiceToAgent),
        (T::SessionRequest, S::AgentToManager),
        (T::SessionResponse, S::ManagerToAgent),
        (T::SessionResponse, S::AgentToService),
        (T::SessionAck, S::ServiceToAgent),
        (T::SessionAck, S::AgentToManager),
    ];
    let establishing = [T::SessionRequest, T::SessionResponse, T::SessionAck];
    let mut seen = Vec::new();
    let mut connect_at = None;
    for e in &r.trace {
        match e {
            TraceEntry::Message(line)
                if line.message.message_id == id
                    && establishing.contains(&line.message.msg_type) =>
            {
                seen.push((line.message.msg_type, line.message.sub_type));
            }
            TraceEntry::Event(ev)
                if ev.kind == "connect"
                    && ev.src.ends_with(&format!(":{l}"))
                    && ev.dst.ends_with(&format!(":{m}")) =>
            {
                connect_at.get_or_insert(seen.len());
            }
            _ => {}
        }
    }
    let want: Vec<_> = expected.iter().map(|(t, s)| (*t, Some(*s))).collect();
    ensure(seen == want, || format!("sequence {seen:?}"))?;
    ensure(connect_at == Some(4), || {
        format!("connect (l={l}, m={m}) observed after {connect_at:?} messages")
    })?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "6 messages share message_id {id}, connect between response and ack, 11 fields set"
    ))
}

fn asymmetry() -> Outcome {
    let (mut checks, mut sessions) = (0, 0);
    for seed in 0..500 {
        let shape = RandomShape {
            failures: seed % 2 == 1,
            ..RandomShape::default()
        };
        let r = run_scenario(random_scenario(seed, shape), seed);
        let v = r
            .verdicts
            .iter()
            .find(|v| v.name == Invariant::KnowledgeAsymmetry.as_str())
            .ok_or("no verdict")?;
        ensure(v.passed, || format!("seed {seed}: {:?}", v.first))?;
        checks += v.checks;
        sessions += r.sessions.len();
    }
    ensure(sessions > 1000, || {
        format!("only {sessions} sessions exercised")
    })?;
    Ok(format!(
        "500 scenarios, {sessions} sessions, {checks} sweeps, 0 violations"
    ))
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let (mut sweeps, mut sessions) = (0, 0);
    for seed in 1000..1200 {
        let r = run_scenario(random_scenario(seed, RandomShape::default()), seed);
        for name in [Invariant::Conservation, Invariant::PortExclusivity] {
            let v = r
                .verdicts
                .iter()
                .find(|v| v.name == name.as_str())
                .ok_or("no verdict")?;
            ensure(v.passed, || {
                format!("seed {seed} {}: {:?}", v.name, v.first)
            })?;
        }
        sweeps += r.sweeps;
        sessions += r.sessions.len();
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "200 scenarios, {sessions} sessions, {sweeps} quiescent points, 0 violations"
    ))
}

fn failure_handling() -> Outcome {
    let start = Instant::now();
    let scenario = fixture("kill_agent.scn");
    let victim = "10.0.0.3";
    let mut c = SimCluster::new(scenario, 1);
    c.run();
    let r = c.report();
    ensure(r.passed(), || failed_lines(&r))?;
    ensure(
        r.agents
            .iter()
            .any(|a| a.starts_with(&format!("{victim} isolated"))),
        || format!("{:?}", r.agents),
    )?;
    let m = c.manager();
    let open: Vec<_> = m
        .sessions()
        .filter(|s| {
            s.state != SessionState::Closed
                && (s.source_agent.to_string() == victim || s.dest_address.to_string() == victim)
        })
        .collect();
    ensure(open.is_empty(), || {
        format!("{} sessions still open", open.len())
    })?;
    ensure(r.dns.iter().all(|d| !d.contains(victim)), || {
        format!("dns {:?}", r.dns)
    })?;
    // the surviving source side was told to close
    let told = c.net.messages().iter().any(|t| {
        t.direction == MsgDirection::Delivered
            && t.message.as_ref().is_some_and(|msg| {
                msg.msg_type == T::SourceCloseRequest
                    && msg.sub_type == Some(S::AgentToSourceService)
            })
    });
    ensure(told, || {
        "surviving source never received a close request".into()
    })?;
    c.replay().compare(c.manager())?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(
        "node isolated, sessions closed from the surviving side, dns purged, replay table equal"
            .into(),
    )
}

fn idle_window() -> Outcome {
    let scenario = fixture("idle_reap.scn");
    let (timeout, tick) = {
        let cfg = ssmmp::harness::cluster::manager_config(&scenario);
        (cfg.idle_timeout_ms, cfg.tick_ms)
    };
    let mut c = SimCluster::new(scenario, 3);
    c.run();
    let r = c.report();
    ensure(r.passed(), || failed_lines(&r))?;
    let mpid = c.manager_pid();
    let at_manager: Vec<_> = c
        .net
        .messages()
        .iter()
        .filter_map(|t| Some((t, t.message.as_ref()?)))
        .collect();
    let last_close = at_manager
        .iter()
        .filter(|(t, msg)| {
            t.direction == MsgDirection::Delivered
                && t.to_pid == mpid
                && matches!(msg.msg_type, T::SourceCloseInfo | T::DestCloseInfo)
                && msg.get(F::DestServiceName) == Some("B")
        })
        .map(|(t, _)| t.time)
        .max()
        .ok_or("B never had a session close")?;
    let shutdowns: Vec<(u64, String)> = at_manager
        .iter()
        .filter(|(t, msg)| {
            t.direction == MsgDirection::Sent
                && t.from_pid == mpid
                && msg.msg_type == T::GracefulShutdownRequest
        })
        .map(|(t, msg)| (t.time, msg.get(F::ServiceName).unwrap_or("?").to_owned()))
        .collect();
    ensure(!shutdowns.iter().any(|(_, s)| s == "A"), || {
        "gateway was reaped".into()
    })?;
    let b: Vec<u64> = shutdowns
        .iter()
        .filter(|(_, s)| s == "B")
        .map(|(t, _)| *t)
        .collect();
    ensure(b.len() == 1, || {
        format!("{} graceful requests for B", b.len())
    })?;
    let (lo, hi) = (last_close + timeout, last_close + timeout + 2 * tick);
    ensure(b[0] > lo && b[0] <= hi, || {
        format!("shutdown at {} outside ({lo}, {hi}]", b[0])
    })?;
    Ok(format!(
        "last close {last_close}, shutdown {} in ({lo}, {hi}], gateway kept",
        b[0]
    ))
}

#[derive(Clone, Copy)]
struct Shape {
    kinds: [ServiceKind; 4],
    n: usize,
}

/// Independent acceptance rule: no vertex reaches itself, gateways have no
/// incoming edge, BaaS vertices no outgoing edge.
fn oracle(shape: Shape, edges: &[(usize, usize)]) -> (bool, bool) {
    let reaches = |from: usize, to: usize| {
        let mut seen = vec![false; shape.n];
        let mut stack: Vec<usize> = edges.iter().filter(|e| e.0 == from).map(|e| e.1).collect();
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if !std::mem::replace(&mut seen[v], true) {
                stack.extend(edges.iter().filter(|e| e.0 == v).map(|e| e.1));
            }
        }
        false
    };
    let cyclic = (0..shape.n).any(|v| reaches(v, v));
    let degree_bad = edges.iter().any(|&(a, b)| {
        shape.kinds[b] == ServiceKind::Gateway || shape.kinds[a] == ServiceKind::Baas
    });
    (cyclic, degree_bad)
}

fn build(shape: Shape, edges: &[(usize, usize)]) -> Result<(), Vec<GraphError>> {
    let mut specs: Vec<ServiceSpec> = (0..shape.n)
        .map(|i| {
            let s = ServiceSpec::new(&format!("v{i}"), shape.kinds[i], &["s"], &[]);
            if shape.kinds[i] == ServiceKind::Gateway {
                s.with_port("s", 80)
            } else {
                s
            }
        })
        .collect();
    let mut conns = Vec::new();
    for (k, &(a, b)) in edges.iter().enumerate() {
        let plug = format!("p{k}");
        specs[a].plugs.push(plug.clone());
        conns.push(AbstractConnection::new(
            &format!("v{a}"),
            &plug,
            &format!("v{b}"),
            "s",
        ));
    }
    build_graph(specs, conns).map(|_| ())
}

/// Multisets of size `k` drawn from `0..m`, as non-decreasing sequences.
fn multisets(m: usize, k: usize, out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    let lo = cur.last().copied().unwrap_or(0);
    for x in lo..m {
        cur.push(x);
        multisets(m, k, out, cur);
        cur.pop();
    }
}

fn graph_equivalence() -> Outcome {
    let start = Instant::now();
    let kinds = [
        ServiceKind::Gateway,
        ServiceKind::Regular,
        ServiceKind::Baas,
    ];
    let mut total = 0u64;
    let mut accepted = 0u64;
    for n in 1..=4usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        let mut edge_sets = Vec::new();
        for k in 0..=4 {
            multisets(pairs.len(), k, &mut edge_sets, &mut Vec::new());
        }
        for code in 0..3usize.pow(n as u32) {
            let mut shape = Shape {
                kinds: [ServiceKind::Regular; 4],
                n,
            };
            let mut c = code;
            for slot in shape.kinds.iter_mut().take(n) {
                *slot = kinds[c % 3];
                c /= 3;
            }
            for set in &edge_sets {
                let edges: Vec<(usize, usize)> = set.iter().map(|&i| pairs[i]).collect();
                let (cyclic, degree_bad) = oracle(shape, &edges);
                let got = build(shape, &edges);
                total += 1;
                let agrees = match &got {
                    Ok(()) => !cyclic && !degree_bad,
                    Err(errs) => {
                        let has_cycle = errs
                            .iter()
                            .any(|e| matches!(e, GraphError::CycleDetected(_)));
                        let has_kind = errs
                            .iter()
                            .any(|e| matches!(e, GraphError::KindViolation(_)));
                        has_cycle == cyclic && has_kind == degree_bad && (cyclic || degree_bad)
                    }
                };
                if got.is_ok() {
                    accepted += 1;
                }
                ensure(agrees, || {
                    format!(
                        "disagreement on kinds {:?} edges {edges:?}: {got:?}",
                        &shape.kinds[..n]
                    )
                })?;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{total} multigraphs ({accepted} valid), 0 disagreements"
    ))
}

fn determinism() -> Outcome {
    let mut scenarios: Vec<(Scenario, u64)> = ["fig1_boot.scn", "kill_agent.scn", "idle_reap.scn"]
        .into_iter()
        .map(|f| (fixture(f), 7))
        .collect();
    let shape = RandomShape {
        failures: true,
        ..RandomShape::default()
    };
    scenarios.extend((0..20).map(|seed| (random_scenario(seed, shape), seed)));
    let mut differs = 0;
    for (s, seed) in &scenarios {
        let a = run_scenario(s.clone(), *seed).render();
        let b = run_scenario(s.clone(), *seed).render();
        ensure(a == b, || {
            format!("{} seed {seed} differs between runs", s.name)
        })?;
        if run_scenario(s.clone(), seed + 1).render() != a {
            differs += 1;
        }
    }
    Ok(format!(
        "{} scenarios byte-identical on rerun ({differs} change with the seed)",
        scenarios.len()
    ))
}

fn tcp_smoke() -> Outcome {
    let start = Instant::now();
    let r = run_scenario_tcp(fixture("fig1_boot.scn"), 1);
    ensure(r.transport == "tcp", || r.transport.clone())?;
    ensure(r.passed(), || failed_lines(&r))?;
    let rec = r.sessions.first().ok_or("no session")?;
    ensure(rec.state == "closed", || format!("session {}", rec.state))?;
    let param = |name: &str| {
        rec.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    };
    let l = param("dest_socket_new_port").ok_or("no l")?;
    let k = param("dest_socket_port").ok_or("no k")?;
    let dest = param("dest_service_instance_network_address").ok_or("no dest")?;
    ensure(l != k, || format!("l equals k ({k})"))?;
    let accepted_on_l = r
        .events()
        .any(|e| e.kind == "accept" && e.dst == format!("{dest}:{l}"));
    ensure(accepted_on_l, || format!("no accept on {dest}:{l}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "session over loopback with l={l} (k={k}), closed, {} sweeps clean",
        r.sweeps
    ))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("conformance", conformance),
        ("choreography", choreography),
        ("knowledge asymmetry", asymmetry),
        ("conservation and port exclusivity", conservation),
        ("failure handling", failure_handling),
        ("idle reaping window", idle_window),
        ("graph validation equivalence", graph_equivalence),
        ("determinism", determinism),
        ("tcp smoke", tcp_smoke),
    ];
    let mut failures = BTreeMap::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let ms = start.elapsed().as_millis();
        match &outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({ms} ms) {detail}", i + 1),
            Err(why) => {
                println!("criterion {} {name}: FAIL ({ms} ms) {why}", i + 1);
                failures.insert(i + 1, why.clone());
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures.len(),
        criteria.len()
    );
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
