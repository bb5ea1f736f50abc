//! Runs a scenario on any [`Network`] driver.

use std::collections::BTreeMap;

use crate::agent::{Agent, AgentConfig, RepositoryEntry};
use crate::graph::AbstractGraph;
use crate::manager::{AgentStatus, InstanceState, Manager, ManagerConfig, SessionState};
use crate::service_runtime::Behavior;
use crate::transport::sim::{SimConfig, SimNet};
use crate::transport::{Command, Endpoint, Event, MsgDirection, Network, Pid, Process};
use crate::wire::format_name_list;

use super::invariants::{self, Invariant, Snapshot, Verdicts};
use super::replay::Replay;
use super::report::{
    EventLine, ExpectLine, InstanceLine, MessageLine, SessionLine, TraceEntry, TraceReport,
    VerdictLine,
};
use super::scenario::{Expectation, Scenario, ScenarioEvent};

/// Repository entries for the services a node hosts, derived from the graph.
pub fn repository_for(
    graph: &AbstractGraph,
    services: &[String],
    behavior: impl Fn(&str) -> Behavior,
) -> Vec<RepositoryEntry> {
    services
        .iter()
        .filter_map(|name| graph.service(name))
        .map(|spec| RepositoryEntry {
            service_name: spec.name.clone(),
            socket_names: spec.sockets.clone(),
            plug_names: spec.plugs.clone(),
            plug_sockets: graph
                .edges()
                .iter()
                .filter(|e| e.source == spec.name)
                .map(|e| (e.plug.clone(), e.socket.clone()))
                .collect(),
            bytecode: behavior(&spec.name),
        })
        .collect()
}

pub fn manager_config(scenario: &Scenario) -> ManagerConfig {
    let mut cfg = ManagerConfig::default();
    if let Some(ms) = scenario.idle_timeout_ms {
        cfg.idle_timeout_ms = ms;
    }
    cfg
}

fn lower<T: std::fmt::Debug>(v: T) -> String {
    format!("{v:?}").to_lowercase()
}

pub struct Cluster<N: Network> {
    pub net: N,
    scenario: Scenario,
    seed: u64,
    manager_pid: Pid,
    replay: Replay,
    verdicts: Verdicts,
    quiescent: bool,
    message_cursor: usize,
    expects: Vec<ExpectLine>,
    notes: Vec<String>,
    stopped: bool,
}

pub type SimCluster = Cluster<SimNet>;

impl SimCluster {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Cluster::with_net(SimNet::new(SimConfig::default(), seed), scenario, seed)
    }
}

impl<N: Network> Cluster<N> {
    /// Boots the Manager and one agent per node on a fresh driver.
    pub fn with_net(mut net: N, scenario: Scenario, seed: u64) -> Self {
        let cfg = manager_config(&scenario);
        let manager_ep = Endpoint::new(scenario.manager, cfg.port);
        let timeout = cfg.request_timeout_ms;
        let manager = Manager::new(scenario.graph.clone(), cfg);
        let manager_pid = net.spawn_root(scenario.manager, Process::Manager(Box::new(manager)));
        for node in &scenario.nodes {
            let repo = repository_for(&scenario.graph, &node.repository, |s| scenario.behavior(s));
            let agent = Agent::new(AgentConfig::new(manager_ep, repo));
            net.spawn_root(node.addr, Process::Agent(Box::new(agent)));
        }
        Cluster {
            net,
            replay: Replay::new(manager_ep, manager_pid, timeout),
            scenario,
            seed,
            manager_pid,
            verdicts: Verdicts::new(),
            quiescent: false,
            message_cursor: 0,
            expects: Vec::new(),
            notes: Vec::new(),
            stopped: false,
        }
    }

    pub fn manager(&self) -> &Manager {
        self.net
            .process(self.manager_pid)
            .and_then(Process::as_manager)
            .expect("manager process")
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn verdicts(&self) -> &Verdicts {
        &self.verdicts
    }

    pub fn replay(&self) -> &Replay {
        &self.replay
    }

    pub fn manager_pid(&self) -> Pid {
        self.manager_pid
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::capture(&self.net, self.manager())
    }

    /// Quiescence: nothing in flight and no actor awaiting a reply.
    pub fn is_quiescent(&self) -> bool {
        self.net.is_idle()
            && !self
                .net
                .processes()
                .any(|p| p.alive && p.process.has_pending_correlations())
    }

    /// Advances the clock to `t`, sweeping at every quiescent point.
    pub fn advance_to(&mut self, t: u64) {
        while self.net.step_before(t) {
            let q = self.is_quiescent();
            if q && !self.quiescent {
                self.sweep();
            }
            self.quiescent = q;
        }
    }

    /// Runs every check now. Only meaningful at a quiescent point.
    pub fn sweep(&mut self) {
        let now = self.net.now();
        self.replay.advance(&self.net);
        self.replay.settle();
        self.check_new_messages();
        let snap = Snapshot::capture(&self.net, self.manager());
        for (inv, outcome) in invariants::sweep(&snap) {
            self.verdicts.record(now, inv, outcome);
        }
        let replay = self.replay.compare(self.manager());
        self.verdicts
            .record(now, Invariant::ReplayEquivalence, replay);
        self.verdicts.sweeps += 1;
    }

    fn check_new_messages(&mut self) {
        let now = self.net.now();
        let new = &self.net.messages()[self.message_cursor..];
        let mut failures = Vec::new();
        for t in new.iter().filter(|t| t.direction == MsgDirection::Sent) {
            match &t.message {
                Some(m) => {
                    if let Err(e) = invariants::check_message_asymmetry(m) {
                        failures.push(e);
                    }
                }
                None => failures.push(format!("unparseable message from {}", t.from)),
            }
        }
        self.message_cursor = self.net.messages().len();
        for f in failures {
            self.verdicts
                .record(now, Invariant::KnowledgeAsymmetry, Err(f));
        }
    }

    fn find_runtime(
        &self,
        service: &str,
        pred: impl Fn(&crate::service_runtime::ServiceRuntime) -> bool,
    ) -> Option<Pid> {
        self.net
            .processes()
            .filter(|p| p.alive)
            .find_map(|p| match p.process {
                Process::Runtime(r) if r.service_name() == service && pred(r) => Some(p.pid),
                _ => None,
            })
    }

    fn note(&mut self, text: String) {
        self.notes.push(format!("{} {text}", self.net.now()));
    }

    /// Applies one timeline event. False when an expectation failed.
    pub fn apply(&mut self, event: &ScenarioEvent) -> bool {
        match event {
            ScenarioEvent::UserRequest { alias } => {
                let addr = self
                    .net
                    .process_mut(self.manager_pid)
                    .and_then(Process::as_manager_mut)
                    .and_then(|m| m.resolve(alias));
                let target = addr.and_then(|ip| {
                    self.net
                        .processes()
                        .filter(|p| p.alive && p.node.ip() == ip)
                        .find_map(|p| match p.process {
                            Process::Runtime(r) if r.service_name() == alias => Some(p.pid),
                            _ => None,
                        })
                });
                match target {
                    Some(pid) => self.net.inject(
                        pid,
                        Event::Command(Command::UserRequest {
                            payload: b"user".to_vec(),
                        }),
                    ),
                    None => self.note(format!("user_request {alias}: no route")),
                }
            }
            ScenarioEvent::OpenSession { service, plug } => {
                match self.find_runtime(service, |_| true) {
                    Some(pid) => self.net.inject(
                        pid,
                        Event::Command(Command::OpenHeld { plug: plug.clone() }),
                    ),
                    None => self.note(format!(
                        "open_session {service} {plug}: no running instance"
                    )),
                }
            }
            ScenarioEvent::CloseSession { service, plug } => {
                match self.find_runtime(service, |r| r.holds(plug)) {
                    Some(pid) => self.net.inject(
                        pid,
                        Event::Command(Command::CloseHeld { plug: plug.clone() }),
                    ),
                    None => self.note(format!("close_session {service} {plug}: no held session")),
                }
            }
            ScenarioEvent::KillInstance { service, id } => {
                match self.find_runtime(service, |r| r.instance_id() == *id) {
                    Some(pid) => self.net.kill_process(pid),
                    None => self.note(format!("kill_instance {service} {id}: not running")),
                }
            }
            ScenarioEvent::KillAgent { node } => self.net.kill_node(*node),
            ScenarioEvent::BreakLink { a, b } => self.net.break_link(*a, *b),
            ScenarioEvent::HealLink { a, b } => self.net.heal_link(*a, *b),
            ScenarioEvent::Fault { service, id, on } => {
                match self.find_runtime(service, |r| r.instance_id() == *id) {
                    Some(pid) => self.net.inject(pid, Event::Command(Command::SetFault(*on))),
                    None => self.note(format!("fault {service} {id}: not running")),
                }
            }
            ScenarioEvent::Shutdown { service, id, hard } => self.net.inject(
                self.manager_pid,
                Event::Command(Command::Shutdown {
                    service: service.clone(),
                    instance_id: *id,
                    hard: *hard,
                }),
            ),
            ScenarioEvent::Scale { service, node } => self.net.inject(
                self.manager_pid,
                Event::Command(Command::Scale {
                    service: service.clone(),
                    node: *node,
                }),
            ),
            ScenarioEvent::AdvanceTime => {}
            ScenarioEvent::Expect(e) => {
                let outcome = self.evaluate(e);
                let passed = outcome.is_ok();
                self.expects.push(ExpectLine {
                    time: self.net.now(),
                    passed,
                    text: e.to_string(),
                    detail: outcome.err().unwrap_or_default(),
                });
                return passed;
            }
        }
        true
    }

    pub fn evaluate(&mut self, e: &Expectation) -> Result<(), String> {
        let m = self.manager();
        let check = |ok: bool, actual: String| {
            if ok {
                Ok(())
            } else {
                Err(format!("actual {actual}"))
            }
        };
        match e {
            Expectation::Sessions {
                established,
                closed,
            } => {
                let est = m
                    .sessions()
                    .filter(|s| s.state == SessionState::Established)
                    .count();
                let cls = m
                    .sessions()
                    .filter(|s| s.state == SessionState::Closed)
                    .count();
                check(
                    established.is_none_or(|n| n == est) && closed.is_none_or(|n| n == cls),
                    format!("established={est} closed={cls}"),
                )
            }
            Expectation::Instances { service, running } => {
                let n = m
                    .instances()
                    .filter(|i| i.service == *service && i.state == InstanceState::Running)
                    .count();
                check(n == *running, format!("running={n}"))
            }
            Expectation::Node { addr, isolated } => {
                let status = m.agent(*addr).map(|a| a.status);
                let is_isolated = status == Some(AgentStatus::Isolated);
                let is_up = status == Some(AgentStatus::Up);
                check(
                    if *isolated { is_isolated } else { is_up },
                    status.map_or("unregistered".into(), lower),
                )
            }
            Expectation::Dns { alias, count } => {
                let n = m.dns().addresses(alias).len();
                check(n == *count, format!("count={n}"))
            }
            Expectation::Served { service, count } => {
                let n: u64 = self
                    .net
                    .processes()
                    .filter_map(|p| p.process.as_runtime())
                    .filter(|r| r.service_name() == service)
                    .map(|r| r.stats().user_requests_served)
                    .sum();
                check(n == *count, format!("count={n}"))
            }
            Expectation::Invariants => {
                if self.is_quiescent() {
                    self.sweep();
                }
                let failed = self.verdicts.failed();
                check(
                    failed.is_empty(),
                    failed
                        .iter()
                        .map(|i| i.as_str())
                        .collect::<Vec<_>>()
                        .join(","),
                )
            }
        }
    }

    /// Runs the whole timeline, stopping at the first failed expectation.
    pub fn run(&mut self) {
        let timeline = self.scenario.timeline.clone();
        for ev in &timeline {
            self.advance_to(ev.at);
            if !self.apply(&ev.event) {
                self.stopped = true;
                self.note(format!("stopped at failed expectation: {}", ev.event));
                break;
            }
        }
        if !self.stopped {
            let end = self.scenario.end_time();
            self.advance_to(end);
        }
        if self.is_quiescent() {
            self.sweep();
        } else {
            self.check_new_messages();
        }
    }

    pub fn report(&self) -> TraceReport {
        let net = &self.net;
        let mut r = TraceReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            transport: net.transport_name().into(),
            end_time: net.now(),
            ..TraceReport::default()
        };
        for e in net.events() {
            let ep = |e: Option<Endpoint>| e.map_or("-".to_owned(), |e| e.to_string());
            r.trace.push(TraceEntry::Event(EventLine {
                seq: e.seq,
                time: e.time,
                kind: e.kind.as_str().to_owned(),
                src: ep(e.src),
                dst: ep(e.dst),
            }));
        }
        for t in net
            .messages()
            .iter()
            .filter(|t| t.direction == MsgDirection::Sent)
        {
            if let Some(m) = &t.message {
                r.trace.push(TraceEntry::Message(MessageLine {
                    seq: t.seq,
                    time: t.time,
                    from: t.from.clone(),
                    to: t.to.clone(),
                    message: m.clone(),
                }));
            }
        }
        r.sort_trace();
        fill_manager_snapshot(&mut r, self.manager());
        for p in net.processes() {
            if let Some(rt) = p.process.as_runtime() {
                let s = rt.stats();
                r.runtimes.push(format!(
                    "{} {} served={} failed={} user={} opened={} accepted={} open_failures={} open={}",
                    p.label,
                    if p.alive { "alive" } else { "dead" },
                    s.requests_served,
                    s.requests_failed,
                    s.user_requests_served,
                    s.sessions_opened,
                    s.sessions_accepted,
                    s.open_failures,
                    rt.handles().count()
                ));
            }
        }
        r.notes = self.notes.clone();
        r.sweeps = self.verdicts.sweeps;
        r.verdicts = verdict_lines(&self.verdicts);
        r.expects = self.expects.clone();
        r
    }
}

pub fn verdict_lines(v: &Verdicts) -> Vec<VerdictLine> {
    v.by_invariant
        .iter()
        .map(|(inv, v)| VerdictLine {
            name: inv.as_str().to_owned(),
            passed: v.passed(),
            checks: v.checks,
            failures: v.failures,
            first: v.first_failure.clone(),
        })
        .collect()
}

/// Appends the Manager's agents, instances, sessions and DNS to a report.
pub fn fill_manager_snapshot(r: &mut TraceReport, m: &Manager) {
    for a in m.agents() {
        let repo = format_name_list(&a.repository).unwrap_or_else(|_| "?".into());
        r.agents.push(format!(
            "{} {} {}",
            a.node_address,
            lower(a.status),
            repo.replace(' ', "")
        ));
    }
    for i in m.instances() {
        let sockets: Vec<String> = i
            .socket_ports
            .iter()
            .map(|(s, p)| format!("{s}:{p}"))
            .collect();
        r.instances.push(InstanceLine {
            service: i.service.clone(),
            instance_id: i.instance_id,
            node: i.node_address.to_string(),
            state: lower(i.state),
            sockets: if sockets.is_empty() {
                "-".into()
            } else {
                sockets.join(",")
            },
        });
    }
    for s in m.sessions() {
        r.sessions.push(SessionLine {
            id: s.id,
            message_id: s.message_id,
            state: lower(s.state),
            reason: s.close_reason.map_or("-".into(), |c| c.to_string()),
            params: s
                .parameters()
                .iter()
                .map(|(n, v)| {
                    (
                        n.as_str().to_owned(),
                        v.clone().unwrap_or_else(|| "-".into()),
                    )
                })
                .collect(),
        });
    }
    let mut aliases: BTreeMap<&String, &Vec<String>> = BTreeMap::new();
    for (alias, targets) in m.dns().cname_records() {
        aliases.insert(alias, targets);
    }
    for (alias, targets) in aliases {
        let resolved: Vec<String> = targets
            .iter()
            .map(|t| match m.dns().a_records().get(t) {
                Some(a) => format!("{t}={a}"),
                None => format!("{t}=?"),
            })
            .collect();
        r.dns.push(format!("{alias} -> {}", resolved.join(",")));
    }
}

/// Parses, runs and reports a scenario in simulation mode.
pub fn run_scenario(scenario: Scenario, seed: u64) -> TraceReport {
    let mut c = SimCluster::new(scenario, seed);
    c.run();
    c.report()
}
