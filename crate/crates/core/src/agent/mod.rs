//! Per-node agent.
//!
//! The agent registers its repository with the Manager, starts and kills
//! service instances on request, polls their health, and relays every
//! session and shutdown message between instances and the Manager. It never
//! decides anything about sessions itself.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use crate::service_runtime::{Behavior, InstanceConfig, ServiceRuntime};
use crate::transport::{Actor, ChannelKind, ConnId, Ctx, Endpoint, Event, NodeAddr, Pid};
use crate::wire::{
    format_name_list, parse_plug_configuration, parse_socket_configuration, FieldName as F,
    FrameDecoder, Message, MessageType as T, StatusCode, SubType as S,
};

pub const DEFAULT_SERVICE_PORT: u16 = 7070;

/// One deployable service as stored on a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepositoryEntry {
    pub service_name: String,
    pub socket_names: Vec<String>,
    pub plug_names: Vec<String>,
    /// Dest socket spoken to by each plug.
    pub plug_sockets: BTreeMap<String, String>,
    pub bytecode: Behavior,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub manager: Endpoint,
    pub service_port: u16,
    pub repository: Vec<RepositoryEntry>,
    pub health_period_ms: u64,
    pub health_timeout_ms: u64,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    pub registration_timeout_ms: u64,
}

impl AgentConfig {
    pub fn new(manager: Endpoint, repository: Vec<RepositoryEntry>) -> Self {
        AgentConfig {
            manager,
            service_port: DEFAULT_SERVICE_PORT,
            repository,
            health_period_ms: 2000,
            health_timeout_ms: 5000,
            backoff_initial_ms: 250,
            backoff_max_ms: 8000,
            registration_timeout_ms: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentState {
    Connecting,
    Registering,
    Operational,
    /// The Manager refused the registration; the agent stays down.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Starting,
    Running,
    /// Answered a graceful shutdown with 200 and is exiting.
    Draining,
}

#[derive(Debug, Clone)]
pub struct LocalInstance {
    pub service_name: String,
    pub instance_id: u64,
    pub pid: Pid,
    pub state: InstanceState,
    conn: Option<ConnId>,
    exec_message_id: Option<u64>,
    health_pending: Option<(u64, u64)>,
}

type Key = (String, u64);

#[derive(Debug, Clone)]
struct SessionCorrelation {
    key: Key,
    responded: bool,
}

/// Rewrites the route tag of a message passing through an agent. Returns
/// `None` for messages an agent does not relay.
pub fn relay(msg: &Message, agent_address: IpAddr) -> Option<Message> {
    let out = match (msg.msg_type, msg.sub_type?) {
        (T::SessionRequest, S::ServiceToAgent) => {
            return Some(msg.rerouted(
                S::AgentToManager,
                &[(F::AgentNetworkAddress, agent_address.to_string())],
            ))
        }
        (T::SessionResponse, S::ManagerToAgent) => S::AgentToService,
        (T::SessionAck, S::ServiceToAgent)
        | (T::SourceCloseInfo, S::SourceServiceToAgent)
        | (T::DestCloseInfo, S::DestServiceToAgent)
        | (T::SourceCloseResponse, S::SourceServiceToAgent)
        | (T::DestCloseResponse, S::DestServiceToAgent)
        | (T::GracefulShutdownResponse, S::ServiceInstanceToAgent)
        | (T::HealthControlResponse, S::ServiceInstanceToAgent) => S::AgentToManager,
        (T::SourceCloseRequest, S::ManagerToAgent) => S::AgentToSourceService,
        (T::DestCloseRequest, S::ManagerToAgent) => S::AgentToDestService,
        (T::GracefulShutdownRequest, S::ManagerToAgent) => S::AgentToServiceInstance,
        _ => return None,
    };
    Some(msg.rerouted(out, &[]))
}

const TIMER_HEALTH: u64 = 1;
const TIMER_RECONNECT: u64 = 2;
const TIMER_REGISTRATION: u64 = 3 << 32;

#[derive(Debug)]
pub struct Agent {
    config: AgentConfig,
    node: Option<NodeAddr>,
    state: AgentState,
    manager_token: Option<u64>,
    manager_conn: Option<ConnId>,
    manager_decoder: FrameDecoder,
    backoff_ms: u64,
    registration_id: u64,
    next_msg: u64,
    spawn_seq: u64,
    instances: BTreeMap<Key, LocalInstance>,
    conn_to_key: BTreeMap<ConnId, Key>,
    decoders: BTreeMap<ConnId, FrameDecoder>,
    unbound: BTreeSet<ConnId>,
    session_requests: BTreeMap<u64, SessionCorrelation>,
    /// Manager-originated requests relayed to an instance, awaiting its reply.
    manager_requests: BTreeMap<u64, (Key, T)>,
    health_timer_armed: bool,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Self {
        let backoff_ms = config.backoff_initial_ms;
        Agent {
            config,
            node: None,
            state: AgentState::Connecting,
            manager_token: None,
            manager_conn: None,
            manager_decoder: FrameDecoder::new(),
            backoff_ms,
            registration_id: 0,
            next_msg: 0,
            spawn_seq: 0,
            instances: BTreeMap::new(),
            conn_to_key: BTreeMap::new(),
            decoders: BTreeMap::new(),
            unbound: BTreeSet::new(),
            session_requests: BTreeMap::new(),
            manager_requests: BTreeMap::new(),
            health_timer_armed: false,
        }
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn instances(&self) -> impl Iterator<Item = &LocalInstance> {
        self.instances.values()
    }

    pub fn has_pending_correlations(&self) -> bool {
        self.state == AgentState::Registering
            || self.instances.values().any(|i| i.exec_message_id.is_some())
            || !self.manager_requests.is_empty()
    }

    fn message_id(&mut self) -> u64 {
        self.next_msg += 1;
        self.next_msg
    }

    fn address(&self) -> IpAddr {
        self.node.expect("agent started").ip()
    }

    fn send_manager(&mut self, ctx: &mut dyn Ctx, msg: Message) {
        if let (Some(conn), Ok(bytes)) = (self.manager_conn, msg.to_bytes()) {
            ctx.send(conn, bytes);
        }
    }

    fn send_instance(&mut self, ctx: &mut dyn Ctx, key: &Key, msg: Message) -> bool {
        let Some(conn) = self.instances.get(key).and_then(|i| i.conn) else {
            return false;
        };
        match msg.to_bytes() {
            Ok(bytes) => {
                ctx.send(conn, bytes);
                true
            }
            Err(_) => false,
        }
    }

    // ---- registration ----

    fn connect_manager(&mut self, ctx: &mut dyn Ctx) {
        self.state = AgentState::Connecting;
        self.manager_decoder = FrameDecoder::new();
        self.manager_token = Some(ctx.connect(self.config.manager, ChannelKind::Control));
    }

    fn retry_later(&mut self, ctx: &mut dyn Ctx) {
        ctx.set_timer(self.backoff_ms, TIMER_RECONNECT);
        self.backoff_ms = (self.backoff_ms * 2).min(self.config.backoff_max_ms);
    }

    fn send_registration(&mut self, ctx: &mut dyn Ctx) {
        self.state = AgentState::Registering;
        let names: Vec<&str> = self
            .config
            .repository
            .iter()
            .map(|e| e.service_name.as_str())
            .collect();
        let repo = format_name_list(&names).unwrap_or_else(|_| "()".into());
        self.registration_id = self.message_id();
        let msg = Message::new(T::InitiationRequest, self.registration_id, None)
            .with(F::AgentNetworkAddress, self.address())
            .with(F::ServiceRepository, repo);
        self.send_manager(ctx, msg);
        ctx.set_timer(
            self.config.registration_timeout_ms,
            TIMER_REGISTRATION | self.registration_id,
        );
    }

    fn on_manager_lost(&mut self, ctx: &mut dyn Ctx) {
        self.manager_conn = None;
        self.manager_token = None;
        if self.state == AgentState::Rejected {
            return;
        }
        // without a Manager the node is presumed isolated: fence local work
        let keys: Vec<Key> = self.instances.keys().cloned().collect();
        for key in keys {
            if let Some(inst) = self.instances.get(&key) {
                ctx.kill(inst.pid);
            }
            self.forget_instance(ctx, &key);
        }
        self.state = AgentState::Connecting;
        self.retry_later(ctx);
    }

    // ---- execution ----

    fn on_execution_request(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let status = match self.try_execute(ctx, msg) {
            Ok(()) => return,
            Err(status) => status,
        };
        let reply =
            Message::new(T::ExecutionResponse, msg.message_id, None).with(F::Status, status);
        self.send_manager(ctx, reply);
    }

    fn try_execute(&mut self, ctx: &mut dyn Ctx, msg: &Message) -> Result<(), StatusCode> {
        let bad = StatusCode::BAD_REQUEST;
        let addr = msg.address(F::AgentNetworkAddress).map_err(|_| bad)?;
        if addr != self.address() {
            return Err(bad);
        }
        let name = msg.text(F::ServiceName).map_err(|_| bad)?;
        let id = msg.number(F::ServiceInstanceId).map_err(|_| bad)?;
        let sockets = msg
            .get(F::SocketConfiguration)
            .ok_or(bad)
            .and_then(|t| parse_socket_configuration(t).map_err(|_| bad))?;
        let plugs = msg
            .get(F::PlugConfiguration)
            .ok_or(bad)
            .and_then(|t| parse_plug_configuration(t).map_err(|_| bad))?;
        let entry = self
            .config
            .repository
            .iter()
            .find(|e| e.service_name == name)
            .cloned()
            .ok_or(StatusCode::NOT_ACCEPTABLE)?;
        let socket_names: BTreeSet<&String> = sockets.iter().map(|(s, _)| s).collect();
        let plug_names: BTreeSet<&String> = plugs.iter().map(|(p, _)| p).collect();
        if socket_names != entry.socket_names.iter().collect()
            || plug_names != entry.plug_names.iter().collect()
            || socket_names.len() != sockets.len()
            || plug_names.len() != plugs.len()
        {
            return Err(bad);
        }
        let key = (name.clone(), id);
        if self.instances.contains_key(&key) || sockets.iter().any(|(_, p)| ctx.is_port_bound(*p)) {
            return Err(StatusCode::CONFLICT);
        }
        self.spawn_seq += 1;
        let config = InstanceConfig {
            service_name: name.clone(),
            instance_id: id,
            socket_ports: sockets.into_iter().collect(),
            plug_targets: plugs.into_iter().collect(),
            plug_sockets: entry.plug_sockets.clone(),
            agent_port: self.config.service_port,
            message_id_base: self.spawn_seq << 32,
            behavior: entry.bytecode.clone(),
        };
        let pid = ctx
            .spawn(ServiceRuntime::new(config))
            .map_err(|_| StatusCode::INTERNAL_ERROR)?;
        self.instances.insert(
            key,
            LocalInstance {
                service_name: name,
                instance_id: id,
                pid,
                state: InstanceState::Starting,
                conn: None,
                exec_message_id: Some(msg.message_id),
                health_pending: None,
            },
        );
        Ok(())
    }

    fn on_hello(&mut self, ctx: &mut dyn Ctx, conn: ConnId, msg: &Message) {
        let key = match (msg.text(F::ServiceName), msg.number(F::ServiceInstanceId)) {
            (Ok(n), Ok(i)) => (n, i),
            _ => return,
        };
        let Some(inst) = self.instances.get_mut(&key) else {
            ctx.close(conn);
            return;
        };
        if inst.conn.is_some() {
            return;
        }
        self.unbound.remove(&conn);
        inst.conn = Some(conn);
        inst.state = InstanceState::Running;
        self.conn_to_key.insert(conn, key);
        if let Some(exec) = inst.exec_message_id.take() {
            let reply =
                Message::new(T::ExecutionResponse, exec, None).with(F::Status, StatusCode::CREATED);
            self.send_manager(ctx, reply);
        }
    }

    /// Drops an instance and fails every correlation that depended on it.
    fn forget_instance(&mut self, ctx: &mut dyn Ctx, key: &Key) {
        let Some(inst) = self.instances.remove(key) else {
            return;
        };
        if let Some(conn) = inst.conn {
            self.conn_to_key.remove(&conn);
            self.decoders.remove(&conn);
            ctx.close(conn);
        }
        if let Some(exec) = inst.exec_message_id {
            let reply = Message::new(T::ExecutionResponse, exec, None)
                .with(F::Status, StatusCode::INTERNAL_ERROR);
            self.send_manager(ctx, reply);
        }
        let requests: Vec<(u64, T)> = self
            .manager_requests
            .iter()
            .filter(|(_, (k, _))| k == key)
            .map(|(id, (_, t))| (*id, *t))
            .collect();
        for (id, t) in requests {
            self.manager_requests.remove(&id);
            self.fail_request(ctx, id, t, StatusCode::UNAVAILABLE);
        }
        let answered: Vec<u64> = self
            .session_requests
            .iter()
            .filter(|(_, c)| &c.key == key && c.responded)
            .map(|(id, _)| *id)
            .collect();
        for id in answered {
            self.session_requests.remove(&id);
            self.failed_ack(ctx, id);
        }
    }

    fn fail_request(&mut self, ctx: &mut dyn Ctx, id: u64, request: T, status: StatusCode) {
        let response = match request {
            T::SourceCloseRequest => T::SourceCloseResponse,
            T::DestCloseRequest => T::DestCloseResponse,
            T::GracefulShutdownRequest => T::GracefulShutdownResponse,
            T::HardShutdownRequest => T::HardShutdownResponse,
            _ => return,
        };
        let msg = Message::new(response, id, Some(S::AgentToManager)).with(F::Status, status);
        self.send_manager(ctx, msg);
    }

    fn failed_ack(&mut self, ctx: &mut dyn Ctx, id: u64) {
        let ack = Message::new(T::SessionAck, id, Some(S::AgentToManager))
            .with(F::Status, StatusCode::UNAVAILABLE)
            .with(F::SourcePlugPort, 0)
            .with(F::DestSocketNewPort, 0);
        self.send_manager(ctx, ack);
    }

    fn health_report(&mut self, ctx: &mut dyn Ctx, key: &Key, id: u64, status: StatusCode) {
        let msg = Message::new(T::HealthControlResponse, id, Some(S::AgentToManager))
            .with(F::ServiceName, &key.0)
            .with(F::ServiceInstanceId, key.1)
            .with(F::Status, status);
        self.send_manager(ctx, msg);
    }

    fn on_child_exited(&mut self, ctx: &mut dyn Ctx, pid: Pid) {
        let Some((key, state, started)) = self
            .instances
            .iter()
            .find(|(_, i)| i.pid == pid)
            .map(|(k, i)| (k.clone(), i.state, i.exec_message_id.is_none()))
        else {
            return;
        };
        if state != InstanceState::Draining && started {
            let id = self.message_id();
            self.health_report(ctx, &key, id, StatusCode::INTERNAL_ERROR);
        }
        self.forget_instance(ctx, &key);
    }

    fn health_tick(&mut self, ctx: &mut dyn Ctx) {
        let now = ctx.now();
        let keys: Vec<Key> = self
            .instances
            .iter()
            .filter(|(_, i)| i.state == InstanceState::Running && i.conn.is_some())
            .map(|(k, _)| k.clone())
            .collect();
        for key in keys {
            let pending = self.instances[&key].health_pending;
            match pending {
                Some((id, sent)) => {
                    if now.saturating_sub(sent) >= self.config.health_timeout_ms {
                        self.instances.get_mut(&key).expect("listed").health_pending = None;
                        self.health_report(ctx, &key, id, StatusCode::INTERNAL_ERROR);
                    }
                }
                None => {
                    let id = self.message_id();
                    let req =
                        Message::new(T::HealthControlRequest, id, Some(S::AgentToServiceInstance))
                            .with(F::ServiceName, &key.0)
                            .with(F::ServiceInstanceId, key.1);
                    if self.send_instance(ctx, &key, req) {
                        self.instances.get_mut(&key).expect("listed").health_pending =
                            Some((id, now));
                    }
                }
            }
        }
    }

    // ---- relaying ----

    fn on_instance_message(&mut self, ctx: &mut dyn Ctx, conn: ConnId, msg: Message) {
        let Some(key) = self.conn_to_key.get(&conn).cloned() else {
            if msg.msg_type == T::HealthControlResponse {
                self.on_hello(ctx, conn, &msg);
            }
            return;
        };
        match msg.msg_type {
            T::HealthControlResponse => {
                let inst = self.instances.get_mut(&key).expect("bound connection");
                if inst.health_pending.map(|(id, _)| id) != Some(msg.message_id) {
                    return;
                }
                inst.health_pending = None;
                let abnormal = msg.status().map(|s| s != StatusCode::OK).unwrap_or(true);
                if abnormal {
                    if let Some(out) = relay(&msg, self.address()) {
                        self.send_manager(ctx, out);
                    }
                }
                return;
            }
            T::SessionRequest => {
                self.session_requests.insert(
                    msg.message_id,
                    SessionCorrelation {
                        key: key.clone(),
                        responded: false,
                    },
                );
            }
            T::SessionAck => {
                self.session_requests.remove(&msg.message_id);
            }
            T::SourceCloseResponse | T::DestCloseResponse | T::GracefulShutdownResponse => {
                self.manager_requests.remove(&msg.message_id);
                if msg.msg_type == T::GracefulShutdownResponse
                    && msg.status().is_ok_and(StatusCode::is_success)
                {
                    if let Some(inst) = self.instances.get_mut(&key) {
                        inst.state = InstanceState::Draining;
                    }
                }
            }
            _ => {}
        }
        if let Some(out) = relay(&msg, self.address()) {
            self.send_manager(ctx, out);
        }
    }

    fn on_manager_message(&mut self, ctx: &mut dyn Ctx, msg: Message) {
        match msg.msg_type {
            T::InitiationResponse => {
                if msg.message_id != self.registration_id || self.state != AgentState::Registering {
                    return;
                }
                match msg.status() {
                    Ok(s) if s.is_success() => {
                        self.state = AgentState::Operational;
                        self.backoff_ms = self.config.backoff_initial_ms;
                        if !self.health_timer_armed {
                            self.health_timer_armed = true;
                            ctx.set_timer(self.config.health_period_ms, TIMER_HEALTH);
                        }
                    }
                    Ok(StatusCode::FORBIDDEN) => {
                        self.state = AgentState::Rejected;
                        if let Some(c) = self.manager_conn.take() {
                            ctx.close(c);
                        }
                    }
                    _ => self.retry_later(ctx),
                }
            }
            T::ExecutionRequest => self.on_execution_request(ctx, &msg),
            T::HardShutdownRequest => {
                let key = match (msg.text(F::ServiceName), msg.number(F::ServiceInstanceId)) {
                    (Ok(n), Ok(i)) => (n, i),
                    _ => return,
                };
                let status = match self.instances.get(&key) {
                    Some(inst) => {
                        // respond only once the process is confirmed dead
                        ctx.kill(inst.pid);
                        self.forget_instance(ctx, &key);
                        StatusCode::OK
                    }
                    None => StatusCode::NOT_FOUND,
                };
                let reply = Message::new(
                    T::HardShutdownResponse,
                    msg.message_id,
                    Some(S::AgentToManager),
                )
                .with(F::Status, status);
                self.send_manager(ctx, reply);
            }
            T::SessionResponse => {
                let Some(corr) = self.session_requests.get_mut(&msg.message_id) else {
                    return;
                };
                corr.responded = true;
                let key = corr.key.clone();
                let delivered = match relay(&msg, self.address()) {
                    Some(out) => self.send_instance(ctx, &key, out),
                    None => false,
                };
                if !delivered {
                    self.session_requests.remove(&msg.message_id);
                    if msg.status().is_ok_and(StatusCode::is_success) {
                        self.failed_ack(ctx, msg.message_id);
                    }
                }
                if !msg.status().is_ok_and(StatusCode::is_success) {
                    self.session_requests.remove(&msg.message_id);
                }
            }
            T::SourceCloseRequest | T::DestCloseRequest | T::GracefulShutdownRequest => {
                let (name_field, id_field) = match msg.msg_type {
                    T::SourceCloseRequest => (F::SourceServiceName, F::SourceServiceInstanceId),
                    T::DestCloseRequest => (F::DestServiceName, F::DestServiceInstanceId),
                    _ => (F::ServiceName, F::ServiceInstanceId),
                };
                let key = match (msg.text(name_field), msg.number(id_field)) {
                    (Ok(n), Ok(i)) => (n, i),
                    _ => return,
                };
                let delivered = match relay(&msg, self.address()) {
                    Some(out) => self.send_instance(ctx, &key, out),
                    None => false,
                };
                if delivered {
                    self.manager_requests
                        .insert(msg.message_id, (key, msg.msg_type));
                } else {
                    self.fail_request(ctx, msg.message_id, msg.msg_type, StatusCode::NOT_FOUND);
                }
            }
            _ => {}
        }
    }
}

impl Actor for Agent {
    fn handle(&mut self, event: Event, ctx: &mut dyn Ctx) {
        match event {
            Event::Start => {
                self.node = Some(ctx.node());
                if ctx
                    .listen(self.config.service_port, ChannelKind::Control)
                    .is_err()
                {
                    ctx.exit();
                    return;
                }
                self.connect_manager(ctx);
            }
            Event::Connected { token, conn, .. } => {
                if Some(token) == self.manager_token {
                    self.manager_conn = Some(conn);
                    self.send_registration(ctx);
                } else {
                    ctx.close(conn);
                }
            }
            Event::ConnectFailed { token, .. } => {
                if Some(token) == self.manager_token {
                    self.manager_token = None;
                    self.retry_later(ctx);
                }
            }
            Event::Accepted { conn, .. } => {
                self.unbound.insert(conn);
                self.decoders.insert(conn, FrameDecoder::new());
            }
            Event::Received { conn, data } => {
                if Some(conn) == self.manager_conn {
                    for frame in self.manager_decoder.push(&data) {
                        if let Ok(msg) = frame.message {
                            self.on_manager_message(ctx, msg);
                        }
                    }
                } else if let Some(dec) = self.decoders.get_mut(&conn) {
                    let frames = dec.push(&data);
                    for frame in frames {
                        if let Ok(msg) = frame.message {
                            self.on_instance_message(ctx, conn, msg);
                        }
                    }
                }
            }
            Event::Closed { conn } => {
                if Some(conn) == self.manager_conn {
                    self.on_manager_lost(ctx);
                } else {
                    self.unbound.remove(&conn);
                    self.decoders.remove(&conn);
                    if let Some(key) = self.conn_to_key.remove(&conn) {
                        if let Some(inst) = self.instances.get_mut(&key) {
                            inst.conn = None;
                        }
                    }
                }
            }
            Event::Timer { tag } => match tag {
                TIMER_HEALTH => {
                    if self.state == AgentState::Operational {
                        self.health_tick(ctx);
                    }
                    ctx.set_timer(self.config.health_period_ms, TIMER_HEALTH);
                }
                TIMER_RECONNECT => {
                    if self.state == AgentState::Rejected {
                        return;
                    }
                    if self.manager_conn.is_some() {
                        self.send_registration(ctx);
                    } else if self.manager_token.is_none() {
                        self.connect_manager(ctx);
                    }
                }
                t if t & TIMER_REGISTRATION == TIMER_REGISTRATION
                    && self.state == AgentState::Registering
                    && t & 0xffff_ffff == self.registration_id =>
                {
                    self.retry_later(ctx);
                }
                _ => {}
            },
            Event::ChildExited { pid } => self.on_child_exited(ctx, pid),
            Event::Command(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::samples;

    #[test]
    fn relay_maps_every_inbound_route_and_keeps_fields() {
        let addr: IpAddr = "fd00::a1".parse().unwrap();
        let mut relayed = 0;
        for (t, sub) in crate::wire::all_variants() {
            let msg = samples::sample(t, sub).unwrap();
            let Some(out) = relay(&msg, addr) else {
                continue;
            };
            relayed += 1;
            assert_eq!(out.message_id, msg.message_id);
            assert_eq!(out.msg_type, msg.msg_type);
            assert!(crate::wire::template(out.msg_type, out.sub_type).is_some());
            let mut tail = out.fields.clone();
            if t == T::SessionRequest {
                assert_eq!(tail.remove(0), (F::AgentNetworkAddress, addr.to_string()));
            }
            assert_eq!(tail, msg.fields);
            assert!(crate::wire::validate_message(&out).is_ok(), "{out}");
        }
        assert_eq!(relayed, 12);
    }

    #[test]
    fn outbound_routes_are_not_relayed_again() {
        let addr: IpAddr = "10.0.0.1".parse().unwrap();
        let msg = samples::sample(T::SessionRequest, Some(S::AgentToManager)).unwrap();
        assert!(relay(&msg, addr).is_none());
        assert!(relay(&samples::sample(T::ExecutionRequest, None).unwrap(), addr).is_none());
    }
}
