//! Rebuilds the Manager's session table from what crossed its control
//! channels, without looking at Manager state.
//!
//! Inputs are the messages the Manager sent and received plus close events on
//! its listening endpoint (a control channel closing means the peer node gets
//! isolated). The table is compared as a multiset of
//! `(eleven parameters, state)`.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use crate::manager::{Manager, SessionKey, SessionState};
use crate::transport::{Endpoint, NodeAddr, Pid};
use crate::transport::{MsgDirection, NetEvent, NetEventKind, Network, TracedMessage};
use crate::wire::{
    parse_socket_configuration, FieldName as F, Message, MessageType as T, StatusCode, SubType as S,
};

type InstanceKey = (String, u64);

/// One row as the oracle sees it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReplayRow {
    pub params: [Option<String>; 11],
    pub state: SessionState,
}

#[derive(Debug, Clone)]
struct Row {
    message_id: u64,
    source_agent: NodeAddr,
    source_service: String,
    source_address: IpAddr,
    source_instance: u64,
    plug: String,
    m: Option<u16>,
    dest_service: String,
    dest_address: IpAddr,
    dest_instance: u64,
    socket: String,
    k: u16,
    l: Option<u16>,
    state: SessionState,
    created_at: u64,
}

impl Row {
    fn key(&self) -> Option<SessionKey> {
        Some((
            self.source_address,
            self.m?,
            self.dest_address,
            self.k,
            self.l?,
        ))
    }

    fn involves(&self, key: &InstanceKey) -> bool {
        (&self.source_service, self.source_instance) == (&key.0, key.1)
            || (&self.dest_service, self.dest_instance) == (&key.0, key.1)
    }

    fn is_open(&self) -> bool {
        self.state != SessionState::Closed
    }

    fn to_public(&self) -> ReplayRow {
        ReplayRow {
            params: [
                Some(self.source_service.clone()),
                Some(self.source_address.to_string()),
                Some(self.source_instance.to_string()),
                Some(self.plug.clone()),
                self.m.map(|p| p.to_string()),
                Some(self.dest_service.clone()),
                Some(self.dest_address.to_string()),
                Some(self.dest_instance.to_string()),
                Some(self.socket.clone()),
                Some(self.k.to_string()),
                self.l.map(|p| p.to_string()),
            ],
            state: self.state,
        }
    }
}

#[derive(Debug, Clone)]
struct Request {
    source_service: String,
    source_address: IpAddr,
    source_instance: u64,
    plug: String,
    socket: String,
}

#[derive(Debug, Clone)]
enum Op {
    Execute(InstanceKey),
    Close(usize),
    Shutdown(InstanceKey),
}

#[derive(Debug, Clone)]
struct Instance {
    node: NodeAddr,
    closed: bool,
}

#[derive(Debug)]
pub struct Replay {
    manager: Endpoint,
    manager_pid: Pid,
    request_timeout_ms: u64,
    pid_node: BTreeMap<Pid, NodeAddr>,
    instances: BTreeMap<InstanceKey, Instance>,
    port_owner: BTreeMap<(IpAddr, u16), InstanceKey>,
    requests: BTreeMap<(NodeAddr, u64), Request>,
    rows: Vec<Option<Row>>,
    by_corr: BTreeMap<(NodeAddr, u64), usize>,
    early: BTreeSet<SessionKey>,
    ops: BTreeMap<u64, Op>,
    msg_cursor: usize,
    event_cursor: usize,
}

impl Replay {
    pub fn new(manager: Endpoint, manager_pid: Pid, request_timeout_ms: u64) -> Self {
        Replay {
            manager,
            manager_pid,
            request_timeout_ms,
            pid_node: BTreeMap::new(),
            instances: BTreeMap::new(),
            port_owner: BTreeMap::new(),
            requests: BTreeMap::new(),
            rows: Vec::new(),
            by_corr: BTreeMap::new(),
            early: BTreeSet::new(),
            ops: BTreeMap::new(),
            msg_cursor: 0,
            event_cursor: 0,
        }
    }

    /// Consumes everything traced since the last call, in step order.
    pub fn advance<N: Network + ?Sized>(&mut self, net: &N) {
        let events = &net.events()[self.event_cursor..];
        let messages = &net.messages()[self.msg_cursor..];
        self.event_cursor = net.events().len();
        self.msg_cursor = net.messages().len();
        let (mut e, mut m) = (0, 0);
        while e < events.len() || m < messages.len() {
            let take_event = match (events.get(e), messages.get(m)) {
                (Some(ev), Some(msg)) => ev.seq <= msg.seq,
                (Some(_), None) => true,
                _ => false,
            };
            if take_event {
                self.on_event(&events[e]);
                e += 1;
            } else {
                self.on_traced(&messages[m]);
                m += 1;
            }
        }
    }

    /// A quiescent point: the Manager has settled every pending record by
    /// now, so the oracle does the same.
    pub fn settle(&mut self) {
        for row in self.rows.iter_mut().flatten() {
            if row.state == SessionState::Pending {
                row.state = SessionState::Closed;
            }
        }
    }

    pub fn rows(&self) -> Vec<ReplayRow> {
        let mut out: Vec<ReplayRow> = self.rows.iter().flatten().map(Row::to_public).collect();
        out.sort();
        out
    }

    /// Compares against the Manager; `Err` describes the first difference.
    pub fn compare(&self, manager: &Manager) -> Result<(), String> {
        let mut actual: Vec<ReplayRow> = manager
            .sessions()
            .map(|s| ReplayRow {
                params: s.parameters().map(|(_, v)| v),
                state: s.state,
            })
            .collect();
        actual.sort();
        let expected = self.rows();
        if actual == expected {
            return Ok(());
        }
        let missing = expected.iter().find(|r| !actual.contains(r));
        let extra = actual.iter().find(|r| !expected.contains(r));
        Err(format!(
            "replay has {} rows, manager has {}; replay-only {:?}; manager-only {:?}",
            expected.len(),
            actual.len(),
            missing,
            extra
        ))
    }

    fn on_event(&mut self, ev: &NetEvent) {
        if ev.kind != NetEventKind::Close {
            return;
        }
        let (Some(src), Some(dst)) = (ev.src, ev.dst) else {
            return;
        };
        let peer = if dst == self.manager {
            src
        } else if src == self.manager {
            dst
        } else {
            return;
        };
        self.isolate(peer.node);
    }

    fn on_traced(&mut self, t: &TracedMessage) {
        let Some(msg) = &t.message else { return };
        match t.direction {
            MsgDirection::Delivered if t.to_pid == self.manager_pid => self.on_received(t, msg),
            MsgDirection::Sent if t.from_pid == self.manager_pid => self.on_sent(t, msg),
            _ => {}
        }
    }

    fn on_received(&mut self, t: &TracedMessage, msg: &Message) {
        if msg.msg_type == T::InitiationRequest {
            if let Ok(addr) = msg.address(F::AgentNetworkAddress) {
                self.pid_node.insert(t.from_pid, NodeAddr(addr));
            }
            return;
        }
        let Some(&node) = self.pid_node.get(&t.from_pid) else {
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        match (msg.msg_type, msg.sub_type) {
            (T::ExecutionResponse, _) => {
                if let Some(Op::Execute(key)) = self.ops.remove(&msg.message_id) {
                    if !status.is_success() {
                        self.instances.remove(&key);
                    }
                }
            }
            (T::SessionRequest, Some(S::AgentToManager)) => {
                let req = (|| {
                    Some(Request {
                        source_address: msg.address(F::AgentNetworkAddress).ok()?,
                        source_service: msg.text(F::SourceServiceName).ok()?,
                        source_instance: msg.number(F::SourceServiceInstanceId).ok()?,
                        plug: msg.text(F::SourcePlugName).ok()?,
                        socket: msg.text(F::DestSocketName).ok()?,
                    })
                })();
                if let Some(req) = req {
                    self.requests.insert((node, msg.message_id), req);
                }
            }
            (T::SessionAck, Some(S::AgentToManager)) => self.on_ack(t.time, node, msg, status),
            (T::SourceCloseInfo | T::DestCloseInfo, Some(S::AgentToManager)) => {
                let Some(key) = close_key(msg) else { return };
                let open = self
                    .rows
                    .iter_mut()
                    .flatten()
                    .find(|r| r.state == SessionState::Established && r.key() == Some(key));
                match open {
                    Some(r) => r.state = SessionState::Closed,
                    None => {
                        if !self.rows.iter().flatten().any(|r| r.key() == Some(key)) {
                            self.early.insert(key);
                        }
                    }
                }
            }
            (T::SourceCloseResponse | T::DestCloseResponse, Some(S::AgentToManager)) => {
                if let Some(Op::Close(idx)) = self.ops.remove(&msg.message_id) {
                    self.close_row(idx);
                }
            }
            (T::GracefulShutdownResponse | T::HardShutdownResponse, Some(S::AgentToManager)) => {
                if let Some(Op::Shutdown(key)) = self.ops.remove(&msg.message_id) {
                    if status.is_success() || status == StatusCode::NOT_FOUND {
                        self.close_instance(&key);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_ack(&mut self, time: u64, node: NodeAddr, msg: &Message, status: StatusCode) {
        let Some(&idx) = self.by_corr.get(&(node, msg.message_id)) else {
            return;
        };
        let timeout = self.request_timeout_ms;
        let ports = msg
            .port(F::SourcePlugPort)
            .ok()
            .zip(msg.port(F::DestSocketNewPort).ok());
        let Some(row) = self.rows[idx].as_mut() else {
            return;
        };
        if row.state == SessionState::Pending && time.saturating_sub(row.created_at) >= timeout {
            row.state = SessionState::Closed;
        }
        match row.state {
            SessionState::Established => {}
            SessionState::Pending if !status.is_success() => {
                self.by_correlation_remove(node, msg.message_id);
                self.rows[idx] = None;
            }
            SessionState::Pending => {
                let Some((m, l)) = ports else { return };
                row.m = Some(m);
                row.l = Some(l);
                row.state = SessionState::Established;
                let key = row.key().expect("ports just set");
                let src = (row.source_service.clone(), row.source_instance);
                let dst = (row.dest_service.clone(), row.dest_instance);
                self.by_correlation_remove(node, msg.message_id);
                let live = |k: &InstanceKey| self.instances.get(k).is_some_and(|i| !i.closed);
                let vanished = !live(&src) || !live(&dst);
                if self.early.remove(&key) || vanished {
                    self.close_row(idx);
                }
            }
            SessionState::Closed => {
                if let (true, Some((m, l))) = (status.is_success(), ports) {
                    row.m = Some(m);
                    row.l = Some(l);
                }
                self.by_correlation_remove(node, msg.message_id);
            }
        }
    }

    fn by_correlation_remove(&mut self, node: NodeAddr, message_id: u64) {
        self.by_corr.remove(&(node, message_id));
    }

    fn on_sent(&mut self, t: &TracedMessage, msg: &Message) {
        match (msg.msg_type, msg.sub_type) {
            (T::ExecutionRequest, _) => {
                let parsed = (|| {
                    Some((
                        NodeAddr(msg.address(F::AgentNetworkAddress).ok()?),
                        msg.text(F::ServiceName).ok()?,
                        msg.number(F::ServiceInstanceId).ok()?,
                        parse_socket_configuration(msg.get(F::SocketConfiguration)?).ok()?,
                    ))
                })();
                let Some((node, service, id, sockets)) = parsed else {
                    return;
                };
                let key = (service, id);
                for (_, port) in sockets {
                    self.port_owner.insert((node.ip(), port), key.clone());
                }
                self.instances.insert(
                    key.clone(),
                    Instance {
                        node,
                        closed: false,
                    },
                );
                self.ops.insert(msg.message_id, Op::Execute(key));
            }
            (T::SessionResponse, Some(S::ManagerToAgent)) => {
                let Some(&node) = self.pid_node.get(&t.to_pid) else {
                    return;
                };
                let Some(req) = self.requests.remove(&(node, msg.message_id)) else {
                    return;
                };
                if !msg.status().is_ok_and(|s| s.is_success()) {
                    return;
                }
                let (Ok(addr), Ok(k)) = (
                    msg.address(F::DestServiceInstanceNetworkAddress),
                    msg.port(F::DestSocketPort),
                ) else {
                    return;
                };
                let Some(dest) = self.port_owner.get(&(addr, k)).cloned() else {
                    return;
                };
                self.rows.push(Some(Row {
                    message_id: msg.message_id,
                    source_agent: node,
                    source_service: req.source_service,
                    source_address: req.source_address,
                    source_instance: req.source_instance,
                    plug: req.plug,
                    m: None,
                    dest_service: dest.0,
                    dest_address: addr,
                    dest_instance: dest.1,
                    socket: req.socket,
                    k,
                    l: None,
                    state: SessionState::Pending,
                    created_at: t.time,
                }));
                self.by_corr
                    .insert((node, msg.message_id), self.rows.len() - 1);
            }
            (T::SourceCloseRequest | T::DestCloseRequest, Some(S::ManagerToAgent)) => {
                let Some(key) = close_key(msg) else { return };
                if let Some(idx) = self
                    .rows
                    .iter()
                    .rposition(|r| r.as_ref().is_some_and(|r| r.key() == Some(key)))
                {
                    self.ops.insert(msg.message_id, Op::Close(idx));
                }
            }
            (T::GracefulShutdownRequest | T::HardShutdownRequest, Some(S::ManagerToAgent)) => {
                if let (Ok(service), Ok(id)) =
                    (msg.text(F::ServiceName), msg.number(F::ServiceInstanceId))
                {
                    self.ops.insert(msg.message_id, Op::Shutdown((service, id)));
                }
            }
            _ => {}
        }
    }

    fn close_row(&mut self, idx: usize) {
        if let Some(r) = self.rows[idx].as_mut() {
            r.state = SessionState::Closed;
        }
    }

    fn close_instance(&mut self, key: &InstanceKey) {
        let Some(inst) = self.instances.get_mut(key) else {
            return;
        };
        inst.closed = true;
        for r in self.rows.iter_mut().flatten() {
            if r.is_open() && r.involves(key) {
                r.state = SessionState::Closed;
            }
        }
    }

    fn isolate(&mut self, node: NodeAddr) {
        let keys: Vec<InstanceKey> = self
            .instances
            .iter()
            .filter(|(_, i)| i.node == node && !i.closed)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &keys {
            self.close_instance(k);
        }
        for r in self.rows.iter_mut().flatten() {
            if r.is_open() && (r.source_agent == node || r.dest_address == node.ip()) {
                r.state = SessionState::Closed;
            }
        }
    }

    /// Message id of every row, for choreography checks.
    pub fn message_ids(&self) -> Vec<u64> {
        self.rows.iter().flatten().map(|r| r.message_id).collect()
    }
}

fn close_key(msg: &Message) -> Option<SessionKey> {
    Some((
        msg.address(F::SourceServiceInstanceNetworkAddress).ok()?,
        msg.port(F::SourcePlugPort).ok()?,
        msg.address(F::DestServiceInstanceNetworkAddress).ok()?,
        msg.port(F::DestSocketPort).ok()?,
        msg.port(F::DestSocketNewPort).ok()?,
    ))
}
