//! Global invariant checks over a snapshot of the cluster.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::manager::{AgentStatus, InstanceState, Manager, SessionRecord, SessionState};
use crate::service_runtime::{Role, SessionHandle};
use crate::transport::{Endpoint, Network, NodeAddr, Pid, Process, SessionChannel};
use crate::wire::{FieldName as F, Message, MessageType as T};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Invariant {
    Conservation,
    PortExclusivity,
    KnowledgeAsymmetry,
    DnsSoundness,
    IsolationCompleteness,
    ReplayEquivalence,
}

impl Invariant {
    pub const ALL: [Invariant; 6] = [
        Invariant::Conservation,
        Invariant::PortExclusivity,
        Invariant::KnowledgeAsymmetry,
        Invariant::DnsSoundness,
        Invariant::IsolationCompleteness,
        Invariant::ReplayEquivalence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Invariant::Conservation => "session_conservation",
            Invariant::PortExclusivity => "port_exclusivity",
            Invariant::KnowledgeAsymmetry => "knowledge_asymmetry",
            Invariant::DnsSoundness => "dns_soundness",
            Invariant::IsolationCompleteness => "isolation_completeness",
            Invariant::ReplayEquivalence => "replay_equivalence",
        }
    }

    pub fn parse(s: &str) -> Option<Invariant> {
        Invariant::ALL.into_iter().find(|i| i.as_str() == s)
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Running tally for one invariant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Verdict {
    pub checks: u64,
    pub failures: u64,
    /// `(time, detail)` of the first failure.
    pub first_failure: Option<(u64, String)>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Verdicts {
    pub sweeps: u64,
    pub by_invariant: BTreeMap<Invariant, Verdict>,
}

impl Verdicts {
    pub fn new() -> Self {
        Verdicts {
            sweeps: 0,
            by_invariant: Invariant::ALL
                .into_iter()
                .map(|i| (i, Verdict::default()))
                .collect(),
        }
    }

    pub fn record(&mut self, time: u64, inv: Invariant, outcome: Result<(), String>) {
        let v = self.by_invariant.entry(inv).or_default();
        v.checks += 1;
        if let Err(detail) = outcome {
            v.failures += 1;
            v.first_failure.get_or_insert((time, detail));
        }
    }

    pub fn all_passed(&self) -> bool {
        self.by_invariant.values().all(Verdict::passed)
    }

    pub fn failed(&self) -> Vec<Invariant> {
        self.by_invariant
            .iter()
            .filter(|(_, v)| !v.passed())
            .map(|(i, _)| *i)
            .collect()
    }
}

/// One live service instance as the harness sees it.
#[derive(Debug, Clone)]
pub struct RuntimeView {
    pub pid: Pid,
    pub node: NodeAddr,
    pub service: String,
    pub instance_id: u64,
    pub handles: Vec<SessionHandle>,
}

/// Everything the sweep inspects, decoupled from the live simulation so tests
/// can corrupt it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: u64,
    pub sessions: Vec<SessionRecord>,
    pub instances: Vec<(String, u64, NodeAddr, InstanceState, Vec<u16>)>,
    pub agents: Vec<(NodeAddr, AgentStatus)>,
    pub dns_a: Vec<(String, std::net::IpAddr)>,
    pub dns_cname: Vec<(String, Vec<String>)>,
    pub gateways: BTreeSet<String>,
    pub runtimes: Vec<RuntimeView>,
    pub channels: Vec<SessionChannel>,
    pub bound_ports: Vec<(Endpoint, Pid)>,
}

impl Snapshot {
    pub fn capture<N: Network + ?Sized>(net: &N, manager: &Manager) -> Self {
        let runtimes = net
            .processes()
            .filter(|p| p.alive)
            .filter_map(|p| match p.process {
                Process::Runtime(r) => Some(RuntimeView {
                    pid: p.pid,
                    node: p.node,
                    service: r.service_name().to_owned(),
                    instance_id: r.instance_id(),
                    handles: r.handles().cloned().collect(),
                }),
                _ => None,
            })
            .collect();
        Snapshot {
            time: net.now(),
            sessions: manager.sessions().cloned().collect(),
            instances: manager
                .instances()
                .map(|i| {
                    (
                        i.service.clone(),
                        i.instance_id,
                        i.node_address,
                        i.state,
                        i.socket_ports.values().copied().collect(),
                    )
                })
                .collect(),
            agents: manager
                .agents()
                .map(|a| (a.node_address, a.status))
                .collect(),
            dns_a: manager
                .dns()
                .a_records()
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            dns_cname: manager
                .dns()
                .cname_records()
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            gateways: manager.graph().gateways().map(|g| g.name.clone()).collect(),
            runtimes,
            channels: net.session_channels(),
            bound_ports: net.bound_ports(),
        }
    }

    fn open_handles(&self, role: Role) -> usize {
        self.runtimes
            .iter()
            .flat_map(|r| &r.handles)
            .filter(|h| h.role() == role)
            .count()
    }
}

/// Manager table, plug ends, socket ends and transport channels all agree.
pub fn check_conservation(s: &Snapshot) -> Result<(), String> {
    let manager = s
        .sessions
        .iter()
        .filter(|r| r.state == SessionState::Established)
        .count();
    let plugs = s.open_handles(Role::Source);
    let sockets = s.open_handles(Role::Dest);
    let channels = s.channels.len();
    if manager == plugs && plugs == sockets && sockets == channels {
        Ok(())
    } else {
        Err(format!(
            "manager={manager} plug_ends={plugs} socket_ends={sockets} channels={channels}"
        ))
    }
}

/// No `(node, port)` is held twice, by the transport or in Manager records.
pub fn check_port_exclusivity(s: &Snapshot) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for (ep, pid) in &s.bound_ports {
        if !seen.insert(*ep) {
            return Err(format!("{ep} bound twice (second holder pid {pid})"));
        }
    }
    let mut claimed = BTreeSet::new();
    for (svc, id, node, state, ports) in &s.instances {
        if *state == InstanceState::Closed {
            continue;
        }
        for p in ports {
            if !claimed.insert((*node, *p)) {
                return Err(format!("manager assigned {node}:{p} twice ({svc}#{id})"));
            }
        }
    }
    Ok(())
}

const SOURCE_FORBIDDEN: &[F] = &[F::DestServiceInstanceId];
const DEST_FORBIDDEN: &[F] = &[F::SourceServiceInstanceId, F::SourceServiceName];

/// Fields a message may not carry given which side of a session it
/// reaches or leaves.
fn forbidden_for(msg: &Message) -> &'static [F] {
    match msg.msg_type {
        T::SessionRequest
        | T::SessionResponse
        | T::SessionAck
        | T::SourceCloseInfo
        | T::SourceCloseRequest
        | T::SourceCloseResponse => SOURCE_FORBIDDEN,
        T::DestCloseInfo | T::DestCloseRequest | T::DestCloseResponse => DEST_FORBIDDEN,
        _ => &[],
    }
}

pub fn check_message_asymmetry(msg: &Message) -> Result<(), String> {
    match forbidden_for(msg).iter().find(|f| msg.has(**f)) {
        Some(f) => Err(format!("{} {} carries {f}", msg.msg_type, msg.message_id)),
        None => Ok(()),
    }
}

pub fn check_handle_asymmetry(h: &SessionHandle) -> Result<(), String> {
    let forbidden = match h.role() {
        Role::Source => SOURCE_FORBIDDEN,
        Role::Dest => DEST_FORBIDDEN,
    };
    match h.known_fields().iter().find(|(f, _)| forbidden.contains(f)) {
        Some((f, _)) => Err(format!(
            "{:?} handle on conn {} knows {f}",
            h.role(),
            h.conn
        )),
        None => Ok(()),
    }
}

pub fn check_handles_asymmetry(s: &Snapshot) -> Result<(), String> {
    s.runtimes
        .iter()
        .flat_map(|r| &r.handles)
        .try_for_each(check_handle_asymmetry)
}

/// Every DNS address belongs to a running gateway instance at that address.
pub fn check_dns(s: &Snapshot) -> Result<(), String> {
    for (canonical, addr) in &s.dns_a {
        let live = s.instances.iter().any(|(svc, id, node, state, _)| {
            format!("{svc}-{id}") == *canonical
                && *state == InstanceState::Running
                && node.ip() == *addr
                && s.gateways.contains(svc)
        });
        if !live {
            return Err(format!(
                "{canonical} -> {addr} is not a running gateway instance"
            ));
        }
    }
    for (alias, targets) in &s.dns_cname {
        if let Some(t) = targets
            .iter()
            .find(|t| !s.dns_a.iter().any(|(c, _)| c == *t))
        {
            return Err(format!("alias {alias} points at missing record {t}"));
        }
    }
    Ok(())
}

/// An isolated node has no live instance and no open session.
pub fn check_isolation(s: &Snapshot) -> Result<(), String> {
    for (node, status) in &s.agents {
        if *status != AgentStatus::Isolated {
            continue;
        }
        if let Some((svc, id, ..)) = s
            .instances
            .iter()
            .find(|(_, _, n, st, _)| n == node && *st != InstanceState::Closed)
        {
            return Err(format!("isolated {node} still hosts {svc}#{id}"));
        }
        if let Some(r) = s.sessions.iter().find(|r| {
            r.state != SessionState::Closed
                && (r.source_agent == *node || r.dest_address == node.ip())
        }) {
            return Err(format!("isolated {node} still in open session {}", r.id));
        }
    }
    Ok(())
}

/// Runs every snapshot-based check.
pub fn sweep(s: &Snapshot) -> Vec<(Invariant, Result<(), String>)> {
    vec![
        (Invariant::Conservation, check_conservation(s)),
        (Invariant::PortExclusivity, check_port_exclusivity(s)),
        (Invariant::KnowledgeAsymmetry, check_handles_asymmetry(s)),
        (Invariant::DnsSoundness, check_dns(s)),
        (Invariant::IsolationCompleteness, check_isolation(s)),
    ]
}
