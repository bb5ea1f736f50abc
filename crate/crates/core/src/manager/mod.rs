//! The control plane.
//!
//! One state machine holds the agent registry, the instance database, the
//! session table and the gateway DNS. Every inbound message and every tick
//! is handled to completion before the next; flows that need a reply from
//! elsewhere (spawning a dest instance before answering a session request,
//! closing sessions before a graceful shutdown) are kept as explicit pending
//! state instead of blocking.

mod dns;
mod journal;
mod policy;
mod ports;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;

pub use dns::DnsTable;
pub use journal::Journal;
pub use policy::{Candidate, LeastSessions, OnDemand, ScaleOut, ScalingPolicy, SelectionPolicy};
pub use ports::PortPool;

use crate::graph::{AbstractGraph, ServiceKind};
use crate::service_runtime::Role;
use crate::transport::{Actor, ChannelKind, Command, ConnId, Ctx, Event, NodeAddr};
use crate::wire::{
    format_pair_list, parse_name_list, FieldName as F, FrameDecoder, Message, MessageType as T,
    StatusCode, SubType as S,
};

pub const DEFAULT_MANAGER_PORT: u16 = 7000;

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub port: u16,
    pub idle_timeout_ms: u64,
    pub tick_ms: u64,
    pub request_timeout_ms: u64,
    pub pool_start: u16,
    pub pool_end: u16,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            port: DEFAULT_MANAGER_PORT,
            idle_timeout_ms: 30_000,
            tick_ms: 2_000,
            request_timeout_ms: 5_000,
            pool_start: 20000,
            pool_end: 39999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgentStatus {
    Up,
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRecord {
    pub node_address: NodeAddr,
    pub repository: Vec<String>,
    pub status: AgentStatus,
    conn: Option<ConnId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InstanceState {
    Starting,
    Running,
    Draining,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRecord {
    pub service: String,
    pub instance_id: u64,
    pub node_address: NodeAddr,
    pub socket_ports: BTreeMap<String, u16>,
    pub plug_config: BTreeMap<String, String>,
    pub state: InstanceState,
    pub last_activity: u64,
}

impl InstanceRecord {
    pub fn canonical_name(&self) -> String {
        format!("{}-{}", self.service, self.instance_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SessionState {
    Pending,
    Established,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CloseReason {
    /// A close_info from that side.
    Reported(RoleTag),
    /// A close_request to that side was answered.
    Requested(RoleTag),
    NodeIsolated,
    InstanceClosed,
    /// No ack arrived within the request timeout.
    Expired,
}

/// [`Role`] with an ordering, for use in records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoleTag {
    Source,
    Dest,
}

impl From<Role> for RoleTag {
    fn from(r: Role) -> Self {
        match r {
            Role::Source => RoleTag::Source,
            Role::Dest => RoleTag::Dest,
        }
    }
}

impl fmt::Display for CloseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CloseReason::Reported(RoleTag::Source) => f.write_str("source-info"),
            CloseReason::Reported(RoleTag::Dest) => f.write_str("dest-info"),
            CloseReason::Requested(RoleTag::Source) => f.write_str("source-request"),
            CloseReason::Requested(RoleTag::Dest) => f.write_str("dest-request"),
            CloseReason::NodeIsolated => f.write_str("isolated"),
            CloseReason::InstanceClosed => f.write_str("instance-closed"),
            CloseReason::Expired => f.write_str("expired"),
        }
    }
}

/// `(NA_i, m, NA_j, k, l)`: how the Manager recognises a session from either
/// side.
pub type SessionKey = (IpAddr, u16, IpAddr, u16, u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub id: u64,
    pub message_id: u64,
    pub source_agent: NodeAddr,
    pub source_service_name: String,
    pub source_address: IpAddr,
    pub source_instance_id: u64,
    pub plug: String,
    pub plug_port: Option<u16>,
    pub dest_service_name: String,
    pub dest_address: IpAddr,
    pub dest_instance_id: u64,
    pub socket: String,
    pub socket_port: u16,
    pub new_socket_port: Option<u16>,
    pub state: SessionState,
    pub close_reason: Option<CloseReason>,
    pub created_at: u64,
}

impl SessionRecord {
    pub fn key(&self) -> Option<SessionKey> {
        Some((
            self.source_address,
            self.plug_port?,
            self.dest_address,
            self.socket_port,
            self.new_socket_port?,
        ))
    }

    pub fn source(&self) -> (String, u64) {
        (self.source_service_name.clone(), self.source_instance_id)
    }

    pub fn dest(&self) -> (String, u64) {
        (self.dest_service_name.clone(), self.dest_instance_id)
    }

    /// The eleven session parameters; unknown ports are `None`.
    pub fn parameters(&self) -> [(F, Option<String>); 11] {
        [
            (F::SourceServiceName, Some(self.source_service_name.clone())),
            (
                F::SourceServiceInstanceNetworkAddress,
                Some(self.source_address.to_string()),
            ),
            (
                F::SourceServiceInstanceId,
                Some(self.source_instance_id.to_string()),
            ),
            (F::SourcePlugName, Some(self.plug.clone())),
            (F::SourcePlugPort, self.plug_port.map(|p| p.to_string())),
            (F::DestServiceName, Some(self.dest_service_name.clone())),
            (
                F::DestServiceInstanceNetworkAddress,
                Some(self.dest_address.to_string()),
            ),
            (
                F::DestServiceInstanceId,
                Some(self.dest_instance_id.to_string()),
            ),
            (F::DestSocketName, Some(self.socket.clone())),
            (F::DestSocketPort, Some(self.socket_port.to_string())),
            (
                F::DestSocketNewPort,
                self.new_socket_port.map(|p| p.to_string()),
            ),
        ]
    }

    pub fn is_complete(&self) -> bool {
        self.parameters().iter().all(|(_, v)| v.is_some())
    }

    fn is_open(&self) -> bool {
        self.state != SessionState::Closed
    }

    fn involves(&self, key: &(String, u64)) -> bool {
        (&self.source_service_name, self.source_instance_id) == (&key.0, key.1)
            || (&self.dest_service_name, self.dest_instance_id) == (&key.0, key.1)
    }

    /// Fields sent to one side when asking it to close: each side gets only
    /// what it is allowed to know.
    fn view(&self, side: Role) -> Vec<(F, String)> {
        let allowed = match side {
            Role::Source => crate::wire::SOURCE_VIEW,
            Role::Dest => crate::wire::DEST_VIEW,
        };
        let params = self.parameters();
        allowed
            .iter()
            .filter_map(|name| {
                params
                    .iter()
                    .find(|(n, _)| n == name)
                    .and_then(|(n, v)| v.clone().map(|v| (*n, v)))
            })
            .collect()
    }
}

type InstanceKey = (String, u64);

#[derive(Debug, Clone, PartialEq, Eq)]
enum OpKind {
    Execute(InstanceKey),
    Close(u64, Role),
    Graceful(InstanceKey),
    Hard(InstanceKey),
}

#[derive(Debug, Clone)]
struct Op {
    kind: OpKind,
    sent_at: u64,
}

#[derive(Debug, Clone)]
struct SessionRequest {
    agent: NodeAddr,
    message_id: u64,
    source_service: String,
    source_address: IpAddr,
    source_instance: u64,
    plug: String,
    dest_service: String,
    socket: String,
}

const TIMER_TICK: u64 = 1;

#[derive(Debug)]
pub struct Manager {
    config: ManagerConfig,
    graph: AbstractGraph,
    selection: Box<dyn SelectionPolicy>,
    scaling: Box<dyn ScalingPolicy>,
    agents: BTreeMap<NodeAddr, AgentRecord>,
    conn_to_agent: BTreeMap<ConnId, NodeAddr>,
    decoders: BTreeMap<ConnId, FrameDecoder>,
    instances: BTreeMap<InstanceKey, InstanceRecord>,
    next_instance: BTreeMap<String, u64>,
    pools: BTreeMap<NodeAddr, PortPool>,
    sessions: BTreeMap<u64, SessionRecord>,
    next_session: u64,
    by_correlation: BTreeMap<(NodeAddr, u64), u64>,
    early_closes: BTreeMap<SessionKey, u64>,
    waiting: Vec<SessionRequest>,
    ops: BTreeMap<u64, Op>,
    next_msg: u64,
    dns: DnsTable,
    suppressed_gateways: BTreeSet<String>,
    journal: Journal,
}

fn ok(status: StatusCode) -> bool {
    status.is_success()
}

impl Manager {
    pub fn new(graph: AbstractGraph, config: ManagerConfig) -> Self {
        Self::with_policies(graph, config, Box::new(LeastSessions), Box::new(OnDemand))
    }

    pub fn with_policies(
        graph: AbstractGraph,
        config: ManagerConfig,
        selection: Box<dyn SelectionPolicy>,
        scaling: Box<dyn ScalingPolicy>,
    ) -> Self {
        Manager {
            config,
            graph,
            selection,
            scaling,
            agents: BTreeMap::new(),
            conn_to_agent: BTreeMap::new(),
            decoders: BTreeMap::new(),
            instances: BTreeMap::new(),
            next_instance: BTreeMap::new(),
            pools: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 0,
            by_correlation: BTreeMap::new(),
            early_closes: BTreeMap::new(),
            waiting: Vec::new(),
            ops: BTreeMap::new(),
            next_msg: 0,
            dns: DnsTable::new(),
            suppressed_gateways: BTreeSet::new(),
            journal: Journal::new(),
        }
    }

    pub fn set_journal(&mut self, journal: Journal) {
        self.journal = journal;
    }

    // ---- inspection ----

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn graph(&self) -> &AbstractGraph {
        &self.graph
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.agents.values()
    }

    pub fn agent(&self, node: NodeAddr) -> Option<&AgentRecord> {
        self.agents.get(&node)
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instance(&self, service: &str, id: u64) -> Option<&InstanceRecord> {
        self.instances.get(&(service.to_owned(), id))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn established_count(&self) -> usize {
        self.sessions
            .values()
            .filter(|s| s.state == SessionState::Established)
            .count()
    }

    pub fn dns(&self) -> &DnsTable {
        &self.dns
    }

    pub fn resolve(&mut self, alias: &str) -> Option<IpAddr> {
        self.dns.resolve(alias)
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn has_pending_correlations(&self) -> bool {
        !self.ops.is_empty()
            || !self.waiting.is_empty()
            || self
                .sessions
                .values()
                .any(|s| s.state == SessionState::Pending)
    }

    // ---- plumbing ----

    fn message_id(&mut self) -> u64 {
        self.next_msg += 1;
        self.next_msg
    }

    fn note(&mut self, ctx: &dyn Ctx, text: impl AsRef<str>) {
        self.journal.record(ctx.now(), "note", text);
    }

    fn send_conn(&mut self, ctx: &mut dyn Ctx, conn: ConnId, msg: Message) {
        match msg.to_bytes() {
            Ok(bytes) => {
                self.journal.record(ctx.now(), "send", msg.one_line());
                ctx.send(conn, bytes);
            }
            Err(e) => self.note(ctx, format!("unsendable message dropped: {e}")),
        }
    }

    fn send_agent(&mut self, ctx: &mut dyn Ctx, node: NodeAddr, msg: Message) -> bool {
        let conn = self
            .agents
            .get(&node)
            .filter(|a| a.status == AgentStatus::Up)
            .and_then(|a| a.conn);
        match conn {
            Some(conn) => {
                self.send_conn(ctx, conn, msg);
                true
            }
            None => false,
        }
    }

    fn agent_up(&self, node: NodeAddr) -> bool {
        self.agents
            .get(&node)
            .is_some_and(|a| a.status == AgentStatus::Up && a.conn.is_some())
    }

    fn open_sessions_of(&self, key: &InstanceKey) -> usize {
        self.sessions
            .values()
            .filter(|s| s.is_open() && s.involves(key))
            .count()
    }

    fn has_op_for(&self, key: &InstanceKey) -> bool {
        self.ops.values().any(|op| match &op.kind {
            OpKind::Execute(k) | OpKind::Graceful(k) | OpKind::Hard(k) => k == key,
            OpKind::Close(..) => false,
        })
    }

    fn is_gateway(&self, service: &str) -> bool {
        self.graph
            .service(service)
            .is_some_and(|s| s.kind == ServiceKind::Gateway)
    }

    fn touch(&mut self, key: &InstanceKey, now: u64) {
        if let Some(i) = self.instances.get_mut(key) {
            i.last_activity = now;
        }
    }

    // ---- registration ----

    fn on_initiation(&mut self, ctx: &mut dyn Ctx, conn: ConnId, msg: &Message) {
        let parsed = msg.address(F::AgentNetworkAddress).ok().zip(
            msg.get(F::ServiceRepository)
                .and_then(|r| parse_name_list(r).ok()),
        );
        let status = match parsed {
            None => StatusCode::BAD_REQUEST,
            Some((addr, repository)) => {
                let node = NodeAddr(addr);
                if self
                    .agents
                    .get(&node)
                    .is_some_and(|a| a.status == AgentStatus::Isolated)
                {
                    self.note(ctx, format!("registration of isolated node {node} refused"));
                    StatusCode::FORBIDDEN
                } else {
                    self.agents.insert(
                        node,
                        AgentRecord {
                            node_address: node,
                            repository,
                            status: AgentStatus::Up,
                            conn: Some(conn),
                        },
                    );
                    self.conn_to_agent.insert(conn, node);
                    StatusCode::OK
                }
            }
        };
        let reply =
            Message::new(T::InitiationResponse, msg.message_id, None).with(F::Status, status);
        self.send_conn(ctx, conn, reply);
        if ok(status) {
            self.ensure_gateways(ctx);
        }
    }

    // ---- instances ----

    /// Starts a new instance of `service`, preferably on `preferred`.
    pub fn plan_instance_execution(
        &mut self,
        ctx: &mut dyn Ctx,
        service: &str,
        preferred: Option<NodeAddr>,
    ) -> Result<InstanceKey, StatusCode> {
        let spec = self
            .graph
            .service(service)
            .ok_or(StatusCode::NOT_FOUND)?
            .clone();
        // stateful backends are never replicated
        if spec.kind == ServiceKind::Baas
            && self
                .instances
                .values()
                .any(|i| i.service == service && i.state != InstanceState::Closed)
        {
            return Err(StatusCode::CONFLICT);
        }
        let plugs = self
            .graph
            .outgoing_connections(service)
            .map_err(|_| StatusCode::NOT_FOUND)?
            .iter()
            .map(|e| (e.plug.clone(), e.dest.clone()))
            .collect::<Vec<_>>();
        let (pool_start, pool_end) = (self.config.pool_start, self.config.pool_end);
        let node = self
            .agents
            .values()
            .filter(|a| a.status == AgentStatus::Up && a.conn.is_some())
            .filter(|a| a.repository.iter().any(|r| r == service))
            .filter(|a| preferred.is_none_or(|p| p == a.node_address))
            .filter(|a| {
                self.pools
                    .get(&a.node_address)
                    .is_none_or(|pool| spec.fixed_ports.values().all(|p| !pool.is_used(*p)))
            })
            .map(|a| {
                let load = self
                    .instances
                    .values()
                    .filter(|i| {
                        i.node_address == a.node_address && i.state != InstanceState::Closed
                    })
                    .count();
                (load, a.node_address)
            })
            .min()
            .map(|(_, n)| n)
            .ok_or(StatusCode::NOT_ACCEPTABLE)?;
        let pool = self
            .pools
            .entry(node)
            .or_insert_with(|| PortPool::new(pool_start, pool_end));
        let mut socket_ports = BTreeMap::new();
        for socket in &spec.sockets {
            let port = match spec.fixed_ports.get(socket) {
                Some(p) => pool.claim(*p).then_some(*p),
                None => pool.allocate(),
            };
            match port {
                Some(p) => {
                    socket_ports.insert(socket.clone(), p);
                }
                None => {
                    for p in socket_ports.values() {
                        pool.release(*p);
                    }
                    return Err(StatusCode::UNAVAILABLE);
                }
            }
        }
        let id = {
            let n = self.next_instance.entry(service.to_owned()).or_insert(0);
            *n += 1;
            *n
        };
        let ordered_sockets: Vec<(String, u16)> = spec
            .sockets
            .iter()
            .map(|s| (s.clone(), socket_ports[s]))
            .collect();
        let socket_cfg =
            format_pair_list(&ordered_sockets).map_err(|_| StatusCode::INTERNAL_ERROR)?;
        let plug_cfg = format_pair_list(&plugs).map_err(|_| StatusCode::INTERNAL_ERROR)?;
        let msg_id = self.message_id();
        let msg = Message::new(T::ExecutionRequest, msg_id, None)
            .with(F::AgentNetworkAddress, node)
            .with(F::ServiceName, service)
            .with(F::ServiceInstanceId, id)
            .with(F::SocketConfiguration, socket_cfg)
            .with(F::PlugConfiguration, plug_cfg);
        let key = (service.to_owned(), id);
        self.instances.insert(
            key.clone(),
            InstanceRecord {
                service: service.to_owned(),
                instance_id: id,
                node_address: node,
                socket_ports,
                plug_config: plugs.into_iter().collect(),
                state: InstanceState::Starting,
                last_activity: ctx.now(),
            },
        );
        self.ops.insert(
            msg_id,
            Op {
                kind: OpKind::Execute(key.clone()),
                sent_at: ctx.now(),
            },
        );
        self.note(ctx, format!("execute {service}#{id} on {node}"));
        self.send_agent(ctx, node, msg);
        Ok(key)
    }

    fn release_ports(&mut self, key: &InstanceKey) {
        if let Some(inst) = self.instances.get(key) {
            if let Some(pool) = self.pools.get_mut(&inst.node_address) {
                for p in inst.socket_ports.values() {
                    pool.release(*p);
                }
            }
        }
    }

    fn on_execution_response(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let Some(Op {
            kind: OpKind::Execute(key),
            ..
        }) = self.ops.remove(&msg.message_id)
        else {
            self.note(
                ctx,
                format!("execution_response {} matches nothing", msg.message_id),
            );
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        if ok(status) {
            let now = ctx.now();
            let Some(inst) = self.instances.get_mut(&key) else {
                return;
            };
            if inst.state != InstanceState::Starting {
                return;
            }
            inst.state = InstanceState::Running;
            inst.last_activity = now;
            let (alias, canonical, addr) = (
                inst.service.clone(),
                inst.canonical_name(),
                inst.node_address.ip(),
            );
            if self.is_gateway(&alias) {
                self.dns.add(&alias, &canonical, addr);
            }
            self.process_waiting(ctx, &key.0);
        } else {
            self.note(
                ctx,
                format!("execution of {}#{} failed with {status}", key.0, key.1),
            );
            self.release_ports(&key);
            self.instances.remove(&key);
            self.fail_waiting(ctx, &key.0, StatusCode::UNAVAILABLE);
        }
    }

    /// Marks an instance closed and settles everything that referenced it.
    fn close_instance(&mut self, ctx: &mut dyn Ctx, key: &InstanceKey, reason: CloseReason) {
        let Some(inst) = self.instances.get_mut(key) else {
            return;
        };
        if inst.state == InstanceState::Closed {
            return;
        }
        let was_starting = inst.state == InstanceState::Starting;
        inst.state = InstanceState::Closed;
        let canonical = inst.canonical_name();
        self.dns.remove(&canonical);
        self.release_ports(key);
        self.note(
            ctx,
            format!("instance {}#{} closed ({reason})", key.0, key.1),
        );
        self.ops.retain(|_, op| match &op.kind {
            OpKind::Execute(k) | OpKind::Graceful(k) | OpKind::Hard(k) => k != key,
            OpKind::Close(..) => true,
        });
        let affected: Vec<u64> = self
            .sessions
            .values()
            .filter(|s| s.is_open() && s.involves(key))
            .map(|s| s.id)
            .collect();
        for sid in affected {
            let s = &self.sessions[&sid];
            let survivor = if (&s.source_service_name, s.source_instance_id) == (&key.0, key.1) {
                Role::Dest
            } else {
                Role::Source
            };
            let established = s.state == SessionState::Established;
            self.mark_closed(ctx, sid, reason);
            if established {
                self.send_close_request(ctx, sid, survivor);
            }
        }
        if was_starting {
            self.process_waiting(ctx, &key.0);
        }
    }

    fn ensure_gateways(&mut self, ctx: &mut dyn Ctx) {
        let gateways: Vec<String> = self.graph.gateways().map(|g| g.name.clone()).collect();
        for gw in gateways {
            if self.suppressed_gateways.contains(&gw) {
                continue;
            }
            let present = self.instances.values().any(|i| {
                i.service == gw
                    && matches!(i.state, InstanceState::Starting | InstanceState::Running)
            });
            if !present {
                let _ = self.plan_instance_execution(ctx, &gw, None);
            }
        }
    }

    pub fn isolate_node(&mut self, ctx: &mut dyn Ctx, node: NodeAddr) {
        let Some(agent) = self.agents.get_mut(&node) else {
            return;
        };
        if agent.status == AgentStatus::Isolated {
            return;
        }
        agent.status = AgentStatus::Isolated;
        if let Some(conn) = agent.conn.take() {
            self.conn_to_agent.remove(&conn);
            self.decoders.remove(&conn);
            ctx.close(conn);
        }
        self.note(ctx, format!("isolate node {node}"));
        let keys: Vec<InstanceKey> = self
            .instances
            .values()
            .filter(|i| i.node_address == node && i.state != InstanceState::Closed)
            .map(|i| (i.service.clone(), i.instance_id))
            .collect();
        for key in keys {
            self.close_instance(ctx, &key, CloseReason::NodeIsolated);
        }
        let stale: Vec<u64> = self
            .sessions
            .values()
            .filter(|s| s.is_open() && (s.source_agent == node || s.dest_address == node.ip()))
            .map(|s| s.id)
            .collect();
        for sid in stale {
            self.mark_closed(ctx, sid, CloseReason::NodeIsolated);
        }
        self.waiting.retain(|w| w.agent != node);
        let sessions = &self.sessions;
        let instances = &self.instances;
        self.ops.retain(|_, op| match &op.kind {
            OpKind::Close(sid, side) => {
                let s = &sessions[sid];
                let key = match side {
                    Role::Source => s.source(),
                    Role::Dest => s.dest(),
                };
                instances.get(&key).is_none_or(|i| i.node_address != node)
            }
            _ => true,
        });
        self.ensure_gateways(ctx);
    }

    // ---- sessions ----

    fn select_dest(&mut self, service: &str) -> Option<InstanceKey> {
        let mut candidates: Vec<(InstanceKey, Candidate)> = self
            .instances
            .values()
            .filter(|i| i.service == service && i.state == InstanceState::Running)
            .filter(|i| self.agent_up(i.node_address))
            .map(|i| {
                let key = (i.service.clone(), i.instance_id);
                let load = self
                    .sessions
                    .values()
                    .filter(|s| s.is_open() && s.dest() == key)
                    .count();
                (
                    key,
                    Candidate {
                        node: i.node_address,
                        instance_id: i.instance_id,
                        open_sessions: load,
                    },
                )
            })
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let view: Vec<Candidate> = candidates.iter().map(|(_, c)| c.clone()).collect();
        let pick = self.selection.select(&view).min(candidates.len() - 1);
        Some(candidates.swap_remove(pick).0)
    }

    fn on_session_request(&mut self, ctx: &mut dyn Ctx, node: NodeAddr, msg: &Message) {
        let parsed = (|| {
            Some(SessionRequest {
                agent: node,
                message_id: msg.message_id,
                source_address: msg.address(F::AgentNetworkAddress).ok()?,
                source_service: msg.text(F::SourceServiceName).ok()?,
                source_instance: msg.number(F::SourceServiceInstanceId).ok()?,
                plug: msg.text(F::SourcePlugName).ok()?,
                dest_service: msg.text(F::DestServiceName).ok()?,
                socket: msg.text(F::DestSocketName).ok()?,
            })
        })();
        let Some(req) = parsed else {
            let reply = failed_session_response(msg.message_id, StatusCode::BAD_REQUEST);
            self.send_agent(ctx, node, reply);
            return;
        };
        let edge_known = self
            .graph
            .find_edge(
                &req.source_service,
                &req.plug,
                &req.dest_service,
                &req.socket,
            )
            .is_some();
        let source_live = self
            .instances
            .get(&(req.source_service.clone(), req.source_instance))
            .is_some_and(|i| i.state != InstanceState::Closed && i.node_address == node);
        if !edge_known || !source_live {
            self.respond_session(ctx, &req, Err(StatusCode::NOT_FOUND));
            return;
        }
        self.route_request(ctx, req);
    }

    fn route_request(&mut self, ctx: &mut dyn Ctx, req: SessionRequest) {
        if let Some(dest) = self.select_dest(&req.dest_service) {
            self.accept_request(ctx, req, dest);
            return;
        }
        let service = req.dest_service.clone();
        let starting = self
            .instances
            .values()
            .any(|i| i.service == service && i.state == InstanceState::Starting);
        let baas_busy = self
            .graph
            .service(&service)
            .is_some_and(|s| s.kind == ServiceKind::Baas)
            && self
                .instances
                .values()
                .any(|i| i.service == service && i.state != InstanceState::Closed);
        if starting || baas_busy {
            self.waiting.push(req);
            return;
        }
        match self.plan_instance_execution(ctx, &service, None) {
            Ok(_) => self.waiting.push(req),
            Err(status) => self.respond_session(ctx, &req, Err(status)),
        }
    }

    fn accept_request(&mut self, ctx: &mut dyn Ctx, req: SessionRequest, dest: InstanceKey) {
        let inst = &self.instances[&dest];
        let Some(&k) = inst.socket_ports.get(&req.socket) else {
            self.respond_session(ctx, &req, Err(StatusCode::NOT_FOUND));
            return;
        };
        self.next_session += 1;
        let record = SessionRecord {
            id: self.next_session,
            message_id: req.message_id,
            source_agent: req.agent,
            source_service_name: req.source_service.clone(),
            source_address: req.source_address,
            source_instance_id: req.source_instance,
            plug: req.plug.clone(),
            plug_port: None,
            dest_service_name: dest.0.clone(),
            dest_address: inst.node_address.ip(),
            dest_instance_id: dest.1,
            socket: req.socket.clone(),
            socket_port: k,
            new_socket_port: None,
            state: SessionState::Pending,
            close_reason: None,
            created_at: ctx.now(),
        };
        let addr = record.dest_address;
        self.by_correlation
            .insert((req.agent, req.message_id), record.id);
        self.sessions.insert(record.id, record);
        self.respond_session(ctx, &req, Ok((addr, k)));
    }

    fn respond_session(
        &mut self,
        ctx: &mut dyn Ctx,
        req: &SessionRequest,
        outcome: Result<(IpAddr, u16), StatusCode>,
    ) {
        let msg = match outcome {
            Ok((addr, k)) => {
                Message::new(T::SessionResponse, req.message_id, Some(S::ManagerToAgent))
                    .with(F::Status, StatusCode::OK)
                    .with(F::DestServiceInstanceNetworkAddress, addr)
                    .with(F::DestSocketPort, k)
            }
            Err(status) => failed_session_response(req.message_id, status),
        };
        self.send_agent(ctx, req.agent, msg);
    }

    fn process_waiting(&mut self, ctx: &mut dyn Ctx, service: &str) {
        let (ready, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.waiting)
            .into_iter()
            .partition(|w| w.dest_service == service);
        self.waiting = rest;
        for req in ready {
            self.route_request(ctx, req);
        }
    }

    fn fail_waiting(&mut self, ctx: &mut dyn Ctx, service: &str, status: StatusCode) {
        let (failed, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.waiting)
            .into_iter()
            .partition(|w| w.dest_service == service);
        self.waiting = rest;
        for req in failed {
            self.respond_session(ctx, &req, Err(status));
        }
    }

    fn on_session_ack(&mut self, ctx: &mut dyn Ctx, node: NodeAddr, msg: &Message) {
        let Some(&sid) = self.by_correlation.get(&(node, msg.message_id)) else {
            self.note(
                ctx,
                format!("session_ack {} matches nothing", msg.message_id),
            );
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        let ports = msg
            .port(F::SourcePlugPort)
            .ok()
            .zip(msg.port(F::DestSocketNewPort).ok());
        let now = ctx.now();
        let record = self
            .sessions
            .get_mut(&sid)
            .expect("correlated session exists");
        match record.state {
            SessionState::Established => {
                self.journal.record(
                    now,
                    "note",
                    format!(
                        "duplicate session_ack {} ({})",
                        msg.message_id,
                        StatusCode::GONE
                    ),
                );
            }
            SessionState::Pending if !ok(status) => {
                self.by_correlation.remove(&(node, msg.message_id));
                self.sessions.remove(&sid);
                self.journal.record(
                    now,
                    "note",
                    format!("session {sid} not established ({status})"),
                );
            }
            SessionState::Pending => {
                let Some((m, l)) = ports else { return };
                record.plug_port = Some(m);
                record.new_socket_port = Some(l);
                record.state = SessionState::Established;
                let key = record.key().expect("ports just filled");
                let (src, dst) = (record.source(), record.dest());
                self.by_correlation.remove(&(node, msg.message_id));
                self.touch(&src, now);
                self.touch(&dst, now);
                self.journal
                    .record(now, "note", format!("session {sid} established"));
                if self.early_closes.remove(&key).is_some() {
                    self.mark_closed(ctx, sid, CloseReason::Reported(RoleTag::Dest));
                } else {
                    let src_up = self
                        .instances
                        .get(&src)
                        .is_some_and(|i| i.state != InstanceState::Closed);
                    let dst_up = self
                        .instances
                        .get(&dst)
                        .is_some_and(|i| i.state != InstanceState::Closed);
                    if !src_up || !dst_up {
                        // one end vanished while the ack was in flight
                        self.mark_closed(ctx, sid, CloseReason::InstanceClosed);
                        let survivor = if src_up { Role::Source } else { Role::Dest };
                        self.send_close_request(ctx, sid, survivor);
                    }
                }
            }
            SessionState::Closed => {
                // late ack for an expired or isolated record
                self.by_correlation.remove(&(node, msg.message_id));
                if let (true, Some((m, l))) = (ok(status), ports) {
                    record.plug_port = Some(m);
                    record.new_socket_port = Some(l);
                    self.send_close_request(ctx, sid, Role::Source);
                }
            }
        }
    }

    fn on_close_info(&mut self, ctx: &mut dyn Ctx, msg: &Message, side: Role) {
        let key = (|| {
            Some((
                msg.address(F::SourceServiceInstanceNetworkAddress).ok()?,
                msg.port(F::SourcePlugPort).ok()?,
                msg.address(F::DestServiceInstanceNetworkAddress).ok()?,
                msg.port(F::DestSocketPort).ok()?,
                msg.port(F::DestSocketNewPort).ok()?,
            ))
        })();
        let Some(key) = key else { return };
        let open = self
            .sessions
            .values()
            .find(|s| s.state == SessionState::Established && s.key() == Some(key))
            .map(|s| s.id);
        match open {
            Some(sid) => self.mark_closed(ctx, sid, CloseReason::Reported(side.into())),
            None => {
                let known = self.sessions.values().any(|s| s.key() == Some(key));
                if !known {
                    self.early_closes.insert(key, ctx.now());
                    self.note(
                        ctx,
                        format!("close_info for unknown session ({})", StatusCode::NOT_FOUND),
                    );
                }
            }
        }
    }

    fn mark_closed(&mut self, ctx: &mut dyn Ctx, sid: u64, reason: CloseReason) {
        let now = ctx.now();
        let Some(s) = self.sessions.get_mut(&sid) else {
            return;
        };
        if s.state == SessionState::Closed {
            return;
        }
        s.state = SessionState::Closed;
        s.close_reason = Some(reason);
        let (src, dst) = (s.source(), s.dest());
        self.touch(&src, now);
        self.touch(&dst, now);
        self.journal
            .record(now, "note", format!("session {sid} closed ({reason})"));
        self.try_graceful(ctx, &src);
        self.try_graceful(ctx, &dst);
    }

    /// Asks one side of a session to close it.
    pub fn request_session_close(
        &mut self,
        ctx: &mut dyn Ctx,
        sid: u64,
        side: Role,
    ) -> Result<(), StatusCode> {
        let s = self.sessions.get(&sid).ok_or(StatusCode::NOT_FOUND)?;
        if s.state != SessionState::Established {
            return Err(StatusCode::GONE);
        }
        if self.send_close_request(ctx, sid, side) {
            Ok(())
        } else {
            Err(StatusCode::UNAVAILABLE)
        }
    }

    fn send_close_request(&mut self, ctx: &mut dyn Ctx, sid: u64, side: Role) -> bool {
        let Some(s) = self.sessions.get(&sid) else {
            return false;
        };
        if s.key().is_none() {
            return false;
        }
        let key = match side {
            Role::Source => s.source(),
            Role::Dest => s.dest(),
        };
        let Some(node) = self
            .instances
            .get(&key)
            .filter(|i| i.state != InstanceState::Closed)
            .map(|i| i.node_address)
        else {
            return false;
        };
        if !self.agent_up(node) {
            return false;
        }
        let msg_type = match side {
            Role::Source => T::SourceCloseRequest,
            Role::Dest => T::DestCloseRequest,
        };
        let fields = s.view(side);
        let id = self.message_id();
        let mut msg = Message::new(msg_type, id, Some(S::ManagerToAgent));
        msg.fields = fields;
        self.ops.insert(
            id,
            Op {
                kind: OpKind::Close(sid, side),
                sent_at: ctx.now(),
            },
        );
        self.send_agent(ctx, node, msg)
    }

    fn on_close_response(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let Some(Op {
            kind: OpKind::Close(sid, side),
            ..
        }) = self.ops.remove(&msg.message_id)
        else {
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        self.mark_closed(ctx, sid, CloseReason::Requested(side.into()));
        let settled = ok(status)
            || [
                StatusCode::GONE,
                StatusCode::UNAVAILABLE,
                StatusCode::NOT_FOUND,
            ]
            .contains(&status);
        if !settled {
            self.hard_shutdown_side(ctx, sid, side);
        }
    }

    fn hard_shutdown_side(&mut self, ctx: &mut dyn Ctx, sid: u64, side: Role) {
        let Some(s) = self.sessions.get(&sid) else {
            return;
        };
        let key = match side {
            Role::Source => s.source(),
            Role::Dest => s.dest(),
        };
        self.request_hard_shutdown(ctx, &key);
    }

    // ---- shutdown ----

    pub fn request_graceful_shutdown(&mut self, ctx: &mut dyn Ctx, key: &InstanceKey) {
        let Some(inst) = self.instances.get_mut(key) else {
            return;
        };
        if !matches!(inst.state, InstanceState::Running | InstanceState::Draining) {
            return;
        }
        inst.state = InstanceState::Draining;
        let open: Vec<(u64, Role)> = self
            .sessions
            .values()
            .filter(|s| s.state == SessionState::Established && s.involves(key))
            .map(|s| {
                let side = if s.source() == *key {
                    Role::Source
                } else {
                    Role::Dest
                };
                (s.id, side)
            })
            .collect();
        for (sid, side) in open {
            let pending = self
                .ops
                .values()
                .any(|op| matches!(op.kind, OpKind::Close(s, _) if s == sid));
            if !pending && !self.send_close_request(ctx, sid, side) {
                let other = if side == Role::Source {
                    Role::Dest
                } else {
                    Role::Source
                };
                self.send_close_request(ctx, sid, other);
            }
        }
        self.try_graceful(ctx, key);
    }

    fn try_graceful(&mut self, ctx: &mut dyn Ctx, key: &InstanceKey) {
        let Some(inst) = self.instances.get(key) else {
            return;
        };
        if inst.state != InstanceState::Draining
            || self.has_op_for(key)
            || self.open_sessions_of(key) > 0
        {
            return;
        }
        let node = inst.node_address;
        let id = self.message_id();
        let msg = Message::new(T::GracefulShutdownRequest, id, Some(S::ManagerToAgent))
            .with(F::ServiceName, &key.0)
            .with(F::ServiceInstanceId, key.1);
        self.ops.insert(
            id,
            Op {
                kind: OpKind::Graceful(key.clone()),
                sent_at: ctx.now(),
            },
        );
        if !self.send_agent(ctx, node, msg) {
            self.ops.remove(&id);
        }
    }

    pub fn request_hard_shutdown(&mut self, ctx: &mut dyn Ctx, key: &InstanceKey) {
        let Some(inst) = self.instances.get_mut(key) else {
            return;
        };
        if inst.state == InstanceState::Closed {
            return;
        }
        let in_progress = self
            .ops
            .values()
            .any(|op| matches!(&op.kind, OpKind::Hard(k) if k == key));
        if in_progress {
            return;
        }
        inst.state = InstanceState::Draining;
        let node = inst.node_address;
        self.ops.retain(
            |_, op| !matches!(&op.kind, OpKind::Graceful(k) | OpKind::Execute(k) if k == key),
        );
        let id = self.message_id();
        let msg = Message::new(T::HardShutdownRequest, id, Some(S::ManagerToAgent))
            .with(F::ServiceName, &key.0)
            .with(F::ServiceInstanceId, key.1);
        self.ops.insert(
            id,
            Op {
                kind: OpKind::Hard(key.clone()),
                sent_at: ctx.now(),
            },
        );
        if !self.send_agent(ctx, node, msg) {
            self.ops.remove(&id);
            self.isolate_node(ctx, node);
        }
    }

    fn on_graceful_response(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let Some(Op {
            kind: OpKind::Graceful(key),
            ..
        }) = self.ops.remove(&msg.message_id)
        else {
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        if ok(status) || status == StatusCode::NOT_FOUND {
            self.close_instance(ctx, &key, CloseReason::InstanceClosed);
        } else if status == StatusCode::CONFLICT {
            self.note(
                ctx,
                format!(
                    "{}#{} still busy, graceful shutdown retried on next tick",
                    key.0, key.1
                ),
            );
        } else {
            self.request_hard_shutdown(ctx, &key);
        }
    }

    fn on_hard_response(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let Some(Op {
            kind: OpKind::Hard(key),
            ..
        }) = self.ops.remove(&msg.message_id)
        else {
            return;
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        if ok(status) || status == StatusCode::NOT_FOUND {
            self.close_instance(ctx, &key, CloseReason::InstanceClosed);
            self.ensure_gateways(ctx);
        } else if let Some(node) = self.instances.get(&key).map(|i| i.node_address) {
            self.isolate_node(ctx, node);
        }
    }

    fn on_health(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let key = match (msg.text(F::ServiceName), msg.number(F::ServiceInstanceId)) {
            (Ok(n), Ok(i)) => (n, i),
            _ => return,
        };
        let status = msg.status().unwrap_or(StatusCode::INTERNAL_ERROR);
        let Some(inst) = self.instances.get(&key) else {
            return;
        };
        if inst.state == InstanceState::Closed {
            return;
        }
        if status == StatusCode::OVERLOADED {
            let running = self
                .instances
                .values()
                .filter(|i| i.service == key.0 && i.state == InstanceState::Running)
                .count();
            if self.scaling.on_overload(&key.0, running) {
                let _ = self.plan_instance_execution(ctx, &key.0, None);
            }
        } else if !ok(status) {
            self.note(ctx, format!("{}#{} unhealthy ({status})", key.0, key.1));
            self.request_hard_shutdown(ctx, &key);
        }
    }

    // ---- periodic work ----

    fn tick(&mut self, ctx: &mut dyn Ctx) {
        let now = ctx.now();
        let timeout = self.config.request_timeout_ms;
        let expired: Vec<u64> = self
            .sessions
            .values()
            .filter(|s| {
                s.state == SessionState::Pending && now.saturating_sub(s.created_at) >= timeout
            })
            .map(|s| s.id)
            .collect();
        for sid in expired {
            self.mark_closed(ctx, sid, CloseReason::Expired);
        }
        self.early_closes
            .retain(|_, t| now.saturating_sub(*t) < timeout);
        let overdue: Vec<(u64, OpKind)> = self
            .ops
            .iter()
            .filter(|(_, op)| now.saturating_sub(op.sent_at) >= timeout)
            .map(|(id, op)| (*id, op.kind.clone()))
            .collect();
        for (id, kind) in overdue {
            if self.ops.remove(&id).is_none() {
                continue;
            }
            self.note(
                ctx,
                format!("request {id} timed out ({})", StatusCode::TIMEOUT),
            );
            match kind {
                OpKind::Execute(key) => {
                    self.fail_waiting(ctx, &key.0, StatusCode::TIMEOUT);
                    self.request_hard_shutdown(ctx, &key);
                }
                OpKind::Close(sid, side) => {
                    self.mark_closed(ctx, sid, CloseReason::Requested(side.into()));
                    self.hard_shutdown_side(ctx, sid, side);
                }
                OpKind::Graceful(key) => self.request_hard_shutdown(ctx, &key),
                OpKind::Hard(key) => {
                    if let Some(node) = self.instances.get(&key).map(|i| i.node_address) {
                        self.isolate_node(ctx, node);
                    }
                }
            }
        }
        let idle: Vec<InstanceKey> = self
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Running && !self.is_gateway(&i.service))
            .map(|i| ((i.service.clone(), i.instance_id), i.last_activity))
            .filter(|(k, last)| {
                now.saturating_sub(*last) > self.config.idle_timeout_ms
                    && self.open_sessions_of(k) == 0
                    && !self.has_op_for(k)
                    && !self.waiting.iter().any(|w| w.dest_service == k.0)
            })
            .map(|(k, _)| k)
            .collect();
        for key in idle {
            self.note(ctx, format!("{}#{} idle, shutting down", key.0, key.1));
            self.request_graceful_shutdown(ctx, &key);
        }
        let draining: Vec<InstanceKey> = self
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Draining)
            .map(|i| (i.service.clone(), i.instance_id))
            .collect();
        for key in draining {
            self.try_graceful(ctx, &key);
        }
        self.ensure_gateways(ctx);
    }

    fn on_command(&mut self, ctx: &mut dyn Ctx, cmd: Command) {
        match cmd {
            Command::Shutdown {
                service,
                instance_id,
                hard,
            } => {
                if self.is_gateway(&service) {
                    self.suppressed_gateways.insert(service.clone());
                }
                let key = (service, instance_id);
                if hard {
                    self.request_hard_shutdown(ctx, &key);
                } else {
                    self.request_graceful_shutdown(ctx, &key);
                }
            }
            Command::Scale { service, node } => {
                self.suppressed_gateways.remove(&service);
                if let Err(status) = self.plan_instance_execution(ctx, &service, node) {
                    self.note(ctx, format!("scale {service} refused ({status})"));
                }
            }
            _ => {}
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Ctx, conn: ConnId, msg: Message) {
        self.journal.record(ctx.now(), "recv", msg.one_line());
        if msg.msg_type == T::InitiationRequest {
            self.on_initiation(ctx, conn, &msg);
            return;
        }
        let Some(&node) = self.conn_to_agent.get(&conn) else {
            return;
        };
        if !self.agent_up(node) {
            return;
        }
        match (msg.msg_type, msg.sub_type) {
            (T::ExecutionResponse, None) => self.on_execution_response(ctx, &msg),
            (T::SessionRequest, Some(S::AgentToManager)) => {
                self.on_session_request(ctx, node, &msg)
            }
            (T::SessionAck, Some(S::AgentToManager)) => self.on_session_ack(ctx, node, &msg),
            (T::SourceCloseInfo, Some(S::AgentToManager)) => {
                self.on_close_info(ctx, &msg, Role::Source)
            }
            (T::DestCloseInfo, Some(S::AgentToManager)) => {
                self.on_close_info(ctx, &msg, Role::Dest)
            }
            (T::SourceCloseResponse | T::DestCloseResponse, Some(S::AgentToManager)) => {
                self.on_close_response(ctx, &msg)
            }
            (T::GracefulShutdownResponse, Some(S::AgentToManager)) => {
                self.on_graceful_response(ctx, &msg)
            }
            (T::HardShutdownResponse, Some(S::AgentToManager)) => self.on_hard_response(ctx, &msg),
            (T::HealthControlResponse, Some(S::AgentToManager)) => self.on_health(ctx, &msg),
            _ => self.note(ctx, format!("unexpected {} dropped", msg.msg_type)),
        }
    }
}

fn failed_session_response(message_id: u64, status: StatusCode) -> Message {
    Message::new(T::SessionResponse, message_id, Some(S::ManagerToAgent))
        .with(F::Status, status)
        .with(F::DestServiceInstanceNetworkAddress, "::")
        .with(F::DestSocketPort, 0)
}

impl Actor for Manager {
    fn handle(&mut self, event: Event, ctx: &mut dyn Ctx) {
        match event {
            Event::Start => {
                if ctx.listen(self.config.port, ChannelKind::Control).is_err() {
                    ctx.exit();
                    return;
                }
                ctx.set_timer(self.config.tick_ms, TIMER_TICK);
            }
            Event::Accepted { conn, .. } => {
                self.decoders.insert(conn, FrameDecoder::new());
            }
            Event::Received { conn, data } => {
                let Some(dec) = self.decoders.get_mut(&conn) else {
                    return;
                };
                for frame in dec.push(&data) {
                    match frame.message {
                        Ok(msg) => self.on_message(ctx, conn, msg),
                        Err(e) => self.note(ctx, format!("malformed message dropped: {e}")),
                    }
                }
            }
            Event::Closed { conn } => {
                self.decoders.remove(&conn);
                if let Some(node) = self.conn_to_agent.remove(&conn) {
                    if let Some(a) = self.agents.get_mut(&node) {
                        a.conn = None;
                    }
                    self.note(ctx, format!("lost agent {node}"));
                    self.isolate_node(ctx, node);
                }
            }
            Event::Timer { tag } => {
                if tag == TIMER_TICK {
                    self.tick(ctx);
                    ctx.set_timer(self.config.tick_ms, TIMER_TICK);
                }
            }
            Event::Command(cmd) => self.on_command(ctx, cmd),
            Event::Connected { conn, .. } => ctx.close(conn),
            Event::ConnectFailed { .. } | Event::ChildExited { .. } => {}
        }
    }
}
