//! In-instance SDK: the part of every service instance that speaks SSMMP.
//!
//! A runtime binds its configured sockets, keeps one control connection to
//! the local agent, opens and accepts communication sessions, and runs the
//! scripted [`Behavior`] standing in for business logic. Each session handle
//! stores only what its side may know: a source handle has no dest instance
//! id, a dest handle has neither the source instance id nor the source
//! service name.

mod behavior;

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

pub use behavior::Behavior;

use crate::transport::{Actor, ChannelKind, Command, ConnId, Ctx, Endpoint, Event, SpawnError};
use crate::wire::{
    FieldName as F, FrameDecoder, Message, MessageType as T, StatusCode, SubType as S,
};

/// Everything the agent hands a new instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceConfig {
    pub service_name: String,
    pub instance_id: u64,
    pub socket_ports: BTreeMap<String, u16>,
    pub plug_targets: BTreeMap<String, String>,
    /// Which dest socket each plug speaks to; part of the compiled service.
    pub plug_sockets: BTreeMap<String, String>,
    pub agent_port: u16,
    /// Message ids issued by this instance are `message_id_base + n`, n ≥ 1.
    pub message_id_base: u64,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceView {
    pub source_service_name: String,
    pub source_address: IpAddr,
    pub source_instance_id: u64,
    pub plug: String,
    pub plug_port: u16,
    pub dest_service_name: String,
    pub dest_address: IpAddr,
    pub socket: String,
    pub socket_port: u16,
    pub new_socket_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DestView {
    pub source_address: IpAddr,
    /// Learned from the peer's first data frame.
    pub plug: Option<String>,
    pub plug_port: u16,
    pub dest_service_name: String,
    pub dest_address: IpAddr,
    pub dest_instance_id: u64,
    pub socket: String,
    pub socket_port: u16,
    pub new_socket_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionView {
    Source(SourceView),
    Dest(DestView),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Dest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Task(u64),
    Held,
    Serving,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionHandle {
    pub conn: ConnId,
    pub view: SessionView,
    purpose: Purpose,
}

const UNKNOWN_PLUG: &str = "-";

impl SessionHandle {
    pub fn role(&self) -> Role {
        match self.view {
            SessionView::Source(_) => Role::Source,
            SessionView::Dest(_) => Role::Dest,
        }
    }

    /// Ports `(m, k, l)` identifying the session.
    pub fn ports(&self) -> (u16, u16, u16) {
        match &self.view {
            SessionView::Source(v) => (v.plug_port, v.socket_port, v.new_socket_port),
            SessionView::Dest(v) => (v.plug_port, v.socket_port, v.new_socket_port),
        }
    }

    pub fn plug(&self) -> &str {
        match &self.view {
            SessionView::Source(v) => &v.plug,
            SessionView::Dest(v) => v.plug.as_deref().unwrap_or(UNKNOWN_PLUG),
        }
    }

    /// The session parameters held by this side, in close-message order.
    pub fn known_fields(&self) -> Vec<(F, String)> {
        match &self.view {
            SessionView::Source(v) => vec![
                (F::SourceServiceName, v.source_service_name.clone()),
                (
                    F::SourceServiceInstanceNetworkAddress,
                    v.source_address.to_string(),
                ),
                (F::SourceServiceInstanceId, v.source_instance_id.to_string()),
                (F::SourcePlugName, v.plug.clone()),
                (F::SourcePlugPort, v.plug_port.to_string()),
                (F::DestServiceName, v.dest_service_name.clone()),
                (
                    F::DestServiceInstanceNetworkAddress,
                    v.dest_address.to_string(),
                ),
                (F::DestSocketName, v.socket.clone()),
                (F::DestSocketPort, v.socket_port.to_string()),
                (F::DestSocketNewPort, v.new_socket_port.to_string()),
            ],
            SessionView::Dest(v) => vec![
                (
                    F::SourceServiceInstanceNetworkAddress,
                    v.source_address.to_string(),
                ),
                (
                    F::SourcePlugName,
                    v.plug.clone().unwrap_or_else(|| UNKNOWN_PLUG.into()),
                ),
                (F::SourcePlugPort, v.plug_port.to_string()),
                (F::DestServiceName, v.dest_service_name.clone()),
                (
                    F::DestServiceInstanceNetworkAddress,
                    v.dest_address.to_string(),
                ),
                (F::DestServiceInstanceId, v.dest_instance_id.to_string()),
                (F::DestSocketName, v.socket.clone()),
                (F::DestSocketPort, v.socket_port.to_string()),
                (F::DestSocketNewPort, v.new_socket_port.to_string()),
            ],
        }
    }
}

#[derive(Debug, Clone)]
struct PendingOpen {
    plug: String,
    purpose: Purpose,
}

#[derive(Debug, Clone)]
struct PendingConnect {
    message_id: u64,
    plug: String,
    purpose: Purpose,
    dest_address: IpAddr,
    socket_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    User,
    Upstream { conn: ConnId, request: String },
}

#[derive(Debug)]
struct Task {
    origin: Origin,
    remaining: BTreeSet<String>,
    attempts: BTreeMap<String, u32>,
    failed: bool,
}

const TIMER_TASK_REPLY: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    pub requests_served: u64,
    pub requests_failed: u64,
    pub user_requests_served: u64,
    pub sessions_opened: u64,
    pub sessions_accepted: u64,
    pub open_failures: u64,
}

#[derive(Debug)]
pub struct ServiceRuntime {
    config: InstanceConfig,
    agent_token: Option<u64>,
    agent_conn: Option<ConnId>,
    control: FrameDecoder,
    next_msg: u64,
    next_task: u64,
    pending_opens: BTreeMap<u64, PendingOpen>,
    connecting: BTreeMap<u64, PendingConnect>,
    sessions: BTreeMap<ConnId, SessionHandle>,
    data_buffers: BTreeMap<ConnId, Vec<u8>>,
    tasks: BTreeMap<u64, Task>,
    fault: bool,
    shutting_down: bool,
    stats: RuntimeStats,
}

fn encode_frame(payload: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload.as_bytes());
    out
}

fn decode_frames(buf: &mut Vec<u8>) -> Vec<String> {
    let mut out = Vec::new();
    while buf.len() >= 4 {
        let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
        if buf.len() < 4 + len {
            break;
        }
        let frame: Vec<u8> = buf.drain(..4 + len).skip(4).collect();
        out.push(String::from_utf8_lossy(&frame).into_owned());
    }
    out
}

impl ServiceRuntime {
    pub fn new(config: InstanceConfig) -> Self {
        let fault = config.behavior.fault;
        ServiceRuntime {
            config,
            agent_token: None,
            agent_conn: None,
            control: FrameDecoder::new(),
            next_msg: 0,
            next_task: 0,
            pending_opens: BTreeMap::new(),
            connecting: BTreeMap::new(),
            sessions: BTreeMap::new(),
            data_buffers: BTreeMap::new(),
            tasks: BTreeMap::new(),
            fault,
            shutting_down: false,
            stats: RuntimeStats::default(),
        }
    }

    pub fn service_name(&self) -> &str {
        &self.config.service_name
    }

    pub fn instance_id(&self) -> u64 {
        self.config.instance_id
    }

    pub fn config(&self) -> &InstanceConfig {
        &self.config
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats
    }

    pub fn handles(&self) -> impl Iterator<Item = &SessionHandle> {
        self.sessions.values()
    }

    pub fn open_count(&self, role: Role) -> usize {
        self.sessions.values().filter(|h| h.role() == role).count()
    }

    /// True if a held session on `plug` is open.
    pub fn holds(&self, plug: &str) -> bool {
        self.sessions
            .values()
            .any(|h| h.purpose == Purpose::Held && h.plug() == plug)
    }

    pub fn has_pending_correlations(&self) -> bool {
        !self.pending_opens.is_empty() || !self.connecting.is_empty()
    }

    /// Binds every configured socket and dials the agent. On a bind failure
    /// nothing stays bound.
    pub fn start(&mut self, ctx: &mut dyn Ctx) -> Result<(), SpawnError> {
        let mut bound = Vec::new();
        for port in self.config.socket_ports.values() {
            if ctx.listen(*port, ChannelKind::Session).is_err() {
                for p in bound {
                    ctx.unlisten(p);
                }
                return Err(SpawnError::BindFailure(*port));
            }
            bound.push(*port);
        }
        let agent = Endpoint::new(ctx.node(), self.config.agent_port);
        self.agent_token = Some(ctx.connect(agent, ChannelKind::Control));
        Ok(())
    }

    fn message_id(&mut self) -> u64 {
        self.next_msg += 1;
        self.config.message_id_base + self.next_msg
    }

    fn send_control(&mut self, ctx: &mut dyn Ctx, msg: Message) {
        if let Some(conn) = self.agent_conn {
            if let Ok(bytes) = msg.to_bytes() {
                ctx.send(conn, bytes);
            }
        }
    }

    fn health(&self) -> StatusCode {
        if self.fault {
            StatusCode::INTERNAL_ERROR
        } else if self.sessions.len() > self.config.behavior.load_threshold {
            StatusCode::OVERLOADED
        } else {
            StatusCode::OK
        }
    }

    fn health_message(&self, message_id: u64) -> Message {
        Message::new(
            T::HealthControlResponse,
            message_id,
            Some(S::ServiceInstanceToAgent),
        )
        .with(F::ServiceName, &self.config.service_name)
        .with(F::ServiceInstanceId, self.config.instance_id)
        .with(F::Status, self.health())
    }

    // ---- source side ----

    /// Sends a session_request for `plug`; the outcome arrives asynchronously.
    fn open_session(&mut self, ctx: &mut dyn Ctx, plug: &str, purpose: Purpose) -> bool {
        let (Some(dest), Some(socket)) = (
            self.config.plug_targets.get(plug).cloned(),
            self.config.plug_sockets.get(plug).cloned(),
        ) else {
            return false;
        };
        if self.agent_conn.is_none() || self.shutting_down {
            return false;
        }
        let id = self.message_id();
        let msg = Message::new(T::SessionRequest, id, Some(S::ServiceToAgent))
            .with(F::SourceServiceName, &self.config.service_name)
            .with(F::SourceServiceInstanceId, self.config.instance_id)
            .with(F::SourcePlugName, plug)
            .with(F::DestServiceName, dest)
            .with(F::DestSocketName, socket);
        self.pending_opens.insert(
            id,
            PendingOpen {
                plug: plug.to_owned(),
                purpose,
            },
        );
        self.send_control(ctx, msg);
        true
    }

    fn on_session_response(&mut self, ctx: &mut dyn Ctx, msg: &Message) {
        let Some(open) = self.pending_opens.remove(&msg.message_id) else {
            return;
        };
        let ok = msg.status().map(StatusCode::is_success).unwrap_or(false);
        let target = msg
            .address(F::DestServiceInstanceNetworkAddress)
            .ok()
            .zip(msg.port(F::DestSocketPort).ok().filter(|p| *p != 0));
        match (ok, target) {
            (true, Some((addr, k))) => {
                let token = ctx.connect(Endpoint::new(addr.into(), k), ChannelKind::Session);
                self.connecting.insert(
                    token,
                    PendingConnect {
                        message_id: msg.message_id,
                        plug: open.plug,
                        purpose: open.purpose,
                        dest_address: addr,
                        socket_port: k,
                    },
                );
            }
            _ => self.open_failed(ctx, &open.plug, open.purpose),
        }
    }

    fn on_connected(&mut self, ctx: &mut dyn Ctx, token: u64, conn: ConnId, m: u16, l: u16) {
        let Some(pc) = self.connecting.remove(&token) else {
            ctx.close(conn);
            return;
        };
        let view = SourceView {
            source_service_name: self.config.service_name.clone(),
            source_address: ctx.node().ip(),
            source_instance_id: self.config.instance_id,
            plug: pc.plug.clone(),
            plug_port: m,
            dest_service_name: self.config.plug_targets[&pc.plug].clone(),
            dest_address: pc.dest_address,
            socket: self.config.plug_sockets[&pc.plug].clone(),
            socket_port: pc.socket_port,
            new_socket_port: l,
        };
        self.sessions.insert(
            conn,
            SessionHandle {
                conn,
                view: SessionView::Source(view),
                purpose: pc.purpose,
            },
        );
        self.stats.sessions_opened += 1;
        ctx.send(conn, encode_frame(&format!("plug {}", pc.plug)));
        let ack = Message::new(T::SessionAck, pc.message_id, Some(S::ServiceToAgent))
            .with(F::Status, StatusCode::OK)
            .with(F::SourcePlugPort, m)
            .with(F::DestSocketNewPort, l);
        self.send_control(ctx, ack);
        if let Purpose::Task(task) = pc.purpose {
            ctx.send(conn, encode_frame(&format!("req {task}")));
        }
    }

    fn on_connect_failed(&mut self, ctx: &mut dyn Ctx, token: u64) {
        let Some(pc) = self.connecting.remove(&token) else {
            return;
        };
        let ack = Message::new(T::SessionAck, pc.message_id, Some(S::ServiceToAgent))
            .with(F::Status, StatusCode::UNAVAILABLE)
            .with(F::SourcePlugPort, 0)
            .with(F::DestSocketNewPort, 0);
        self.send_control(ctx, ack);
        self.open_failed(ctx, &pc.plug, pc.purpose);
    }

    fn open_failed(&mut self, ctx: &mut dyn Ctx, plug: &str, purpose: Purpose) {
        self.stats.open_failures += 1;
        if let Purpose::Task(task) = purpose {
            self.plug_failed(ctx, task, plug);
        }
    }

    // ---- tasks ----

    fn start_task(&mut self, ctx: &mut dyn Ctx, origin: Origin) {
        self.next_task += 1;
        let id = self.next_task;
        let plugs = self
            .config
            .behavior
            .plugs_for_request(self.config.plug_targets.keys());
        self.tasks.insert(
            id,
            Task {
                origin,
                remaining: plugs.iter().cloned().collect(),
                attempts: plugs.iter().map(|p| (p.clone(), 0)).collect(),
                failed: false,
            },
        );
        if plugs.is_empty() {
            ctx.set_timer(self.config.behavior.hold_ms, TIMER_TASK_REPLY | id);
            return;
        }
        for plug in plugs {
            if !self.open_session(ctx, &plug, Purpose::Task(id)) {
                self.plug_failed(ctx, id, &plug);
            }
        }
    }

    fn plug_done(&mut self, ctx: &mut dyn Ctx, task: u64, plug: &str) {
        let Some(t) = self.tasks.get_mut(&task) else {
            return;
        };
        if t.remaining.remove(plug) && t.remaining.is_empty() {
            ctx.set_timer(self.config.behavior.hold_ms, TIMER_TASK_REPLY | task);
        }
    }

    fn plug_failed(&mut self, ctx: &mut dyn Ctx, task: u64, plug: &str) {
        let retries = self.config.behavior.retries;
        let Some(t) = self.tasks.get_mut(&task) else {
            return;
        };
        if !t.remaining.contains(plug) {
            return;
        }
        let attempts = t.attempts.entry(plug.to_owned()).or_insert(0);
        *attempts += 1;
        if *attempts <= retries && self.open_session(ctx, plug, Purpose::Task(task)) {
            return;
        }
        if let Some(t) = self.tasks.get_mut(&task) {
            t.failed = true;
        }
        self.plug_done(ctx, task, plug);
    }

    fn finish_task(&mut self, ctx: &mut dyn Ctx, id: u64) {
        let Some(task) = self.tasks.remove(&id) else {
            return;
        };
        self.stats.requests_served += 1;
        if task.failed {
            self.stats.requests_failed += 1;
        }
        match task.origin {
            Origin::User => self.stats.user_requests_served += 1,
            Origin::Upstream { conn, request } => {
                if self.sessions.contains_key(&conn) {
                    ctx.send(conn, encode_frame(&format!("rep {request}")));
                }
            }
        }
    }

    // ---- data plane ----

    fn on_accepted(
        &mut self,
        ctx: &mut dyn Ctx,
        listener_port: u16,
        conn: ConnId,
        peer: Endpoint,
        l: u16,
    ) {
        let Some(socket) = self
            .config
            .socket_ports
            .iter()
            .find(|(_, p)| **p == listener_port)
            .map(|(s, _)| s.clone())
        else {
            ctx.close(conn);
            return;
        };
        let view = DestView {
            source_address: peer.node.ip(),
            plug: None,
            plug_port: peer.port,
            dest_service_name: self.config.service_name.clone(),
            dest_address: ctx.node().ip(),
            dest_instance_id: self.config.instance_id,
            socket,
            socket_port: listener_port,
            new_socket_port: l,
        };
        self.stats.sessions_accepted += 1;
        self.sessions.insert(
            conn,
            SessionHandle {
                conn,
                view: SessionView::Dest(view),
                purpose: Purpose::Serving,
            },
        );
    }

    fn on_data(&mut self, ctx: &mut dyn Ctx, conn: ConnId, data: &[u8]) {
        let buf = self.data_buffers.entry(conn).or_default();
        buf.extend_from_slice(data);
        for frame in decode_frames(buf) {
            let (verb, arg) = frame.split_once(' ').unwrap_or((frame.as_str(), ""));
            match verb {
                "plug" => {
                    if let Some(SessionHandle {
                        view: SessionView::Dest(v),
                        ..
                    }) = self.sessions.get_mut(&conn)
                    {
                        if crate::wire::is_token(arg) {
                            v.plug = Some(arg.to_owned());
                        }
                    }
                }
                "req" => {
                    if self.sessions.contains_key(&conn) {
                        self.start_task(
                            ctx,
                            Origin::Upstream {
                                conn,
                                request: arg.to_owned(),
                            },
                        );
                    }
                }
                "rep" => {
                    let Some(h) = self.sessions.get(&conn) else {
                        continue;
                    };
                    if let Purpose::Task(task) = h.purpose {
                        let plug = h.plug().to_owned();
                        self.close_session(ctx, conn, true);
                        self.plug_done(ctx, task, &plug);
                    }
                }
                _ => {}
            }
        }
    }

    /// Closes the data channel; with `inform`, reports the closure to the
    /// Manager through the side-appropriate close_info.
    fn close_session(
        &mut self,
        ctx: &mut dyn Ctx,
        conn: ConnId,
        inform: bool,
    ) -> Option<SessionHandle> {
        let handle = self.sessions.remove(&conn)?;
        self.data_buffers.remove(&conn);
        ctx.close(conn);
        if inform {
            let (msg_type, sub) = match handle.role() {
                Role::Source => (T::SourceCloseInfo, S::SourceServiceToAgent),
                Role::Dest => (T::DestCloseInfo, S::DestServiceToAgent),
            };
            let id = self.message_id();
            let mut msg = Message::new(msg_type, id, Some(sub));
            msg.fields = handle.known_fields();
            self.send_control(ctx, msg);
        }
        Some(handle)
    }

    /// The peer (or the network) ended a session.
    fn on_session_lost(&mut self, ctx: &mut dyn Ctx, conn: ConnId) {
        if let Some(h) = self.close_session(ctx, conn, true) {
            self.session_ended_early(ctx, &h);
        }
    }

    fn session_ended_early(&mut self, ctx: &mut dyn Ctx, h: &SessionHandle) {
        if let Purpose::Task(task) = h.purpose {
            self.plug_failed(ctx, task, h.plug());
        }
    }

    // ---- control plane ----

    fn on_control(&mut self, ctx: &mut dyn Ctx, msg: Message) {
        match (msg.msg_type, msg.sub_type) {
            (T::SessionResponse, Some(S::AgentToService)) => self.on_session_response(ctx, &msg),
            (T::SourceCloseRequest, Some(S::AgentToSourceService)) => {
                self.on_close_request(ctx, &msg, Role::Source)
            }
            (T::DestCloseRequest, Some(S::AgentToDestService)) => {
                self.on_close_request(ctx, &msg, Role::Dest)
            }
            (T::GracefulShutdownRequest, Some(S::AgentToServiceInstance)) => {
                let status = if self.sessions.is_empty() {
                    StatusCode::OK
                } else {
                    StatusCode::CONFLICT
                };
                let reply = Message::new(
                    T::GracefulShutdownResponse,
                    msg.message_id,
                    Some(S::ServiceInstanceToAgent),
                )
                .with(F::Status, status);
                self.send_control(ctx, reply);
                if status == StatusCode::OK {
                    self.shutting_down = true;
                    ctx.exit();
                }
            }
            (T::HealthControlRequest, Some(S::AgentToServiceInstance)) => {
                let reply = self.health_message(msg.message_id);
                self.send_control(ctx, reply);
            }
            _ => {}
        }
    }

    fn on_close_request(&mut self, ctx: &mut dyn Ctx, msg: &Message, role: Role) {
        let key = (
            msg.port(F::SourcePlugPort).ok(),
            msg.port(F::DestSocketPort).ok(),
            msg.port(F::DestSocketNewPort).ok(),
        );
        let found = self
            .sessions
            .values()
            .find(|h| {
                let (m, k, l) = h.ports();
                h.role() == role && (Some(m), Some(k), Some(l)) == key
            })
            .map(|h| h.conn);
        let status = match found {
            Some(conn) => {
                if let Some(h) = self.close_session(ctx, conn, false) {
                    self.session_ended_early(ctx, &h);
                }
                StatusCode::OK
            }
            None => StatusCode::GONE,
        };
        let (t, sub) = match role {
            Role::Source => (T::SourceCloseResponse, S::SourceServiceToAgent),
            Role::Dest => (T::DestCloseResponse, S::DestServiceToAgent),
        };
        self.send_control(
            ctx,
            Message::new(t, msg.message_id, Some(sub)).with(F::Status, status),
        );
    }

    fn on_command(&mut self, ctx: &mut dyn Ctx, cmd: Command) {
        match cmd {
            Command::UserRequest { .. } => self.start_task(ctx, Origin::User),
            Command::OpenHeld { plug } => {
                if !self.open_session(ctx, &plug, Purpose::Held) {
                    self.stats.open_failures += 1;
                }
            }
            Command::CloseHeld { plug } => {
                let conn = self
                    .sessions
                    .values()
                    .find(|h| h.purpose == Purpose::Held && h.plug() == plug)
                    .map(|h| h.conn);
                if let Some(conn) = conn {
                    self.close_session(ctx, conn, true);
                }
            }
            Command::SetFault(on) => self.fault = on,
            Command::Shutdown { .. } | Command::Scale { .. } => {}
        }
    }
}

impl Actor for ServiceRuntime {
    fn handle(&mut self, event: Event, ctx: &mut dyn Ctx) {
        match event {
            Event::Start => {}
            Event::Connected {
                token,
                conn,
                local_port,
                peer_session_port,
            } => {
                if Some(token) == self.agent_token {
                    self.agent_conn = Some(conn);
                    // announce the instance so the agent can bind this channel
                    let id = self.message_id();
                    let hello = self.health_message(id);
                    self.send_control(ctx, hello);
                } else {
                    self.on_connected(ctx, token, conn, local_port, peer_session_port);
                }
            }
            Event::ConnectFailed { token, .. } => {
                if Some(token) == self.agent_token {
                    ctx.exit();
                } else {
                    self.on_connect_failed(ctx, token);
                }
            }
            Event::Accepted {
                listener_port,
                conn,
                peer,
                session_port,
            } => self.on_accepted(ctx, listener_port, conn, peer, session_port),
            Event::Received { conn, data } => {
                if Some(conn) == self.agent_conn {
                    for frame in self.control.push(&data) {
                        if let Ok(msg) = frame.message {
                            self.on_control(ctx, msg);
                        }
                    }
                } else {
                    self.on_data(ctx, conn, &data);
                }
            }
            Event::Closed { conn } => {
                if Some(conn) == self.agent_conn {
                    self.agent_conn = None;
                    ctx.exit();
                } else {
                    self.on_session_lost(ctx, conn);
                }
            }
            Event::Timer { tag } => {
                if tag & TIMER_TASK_REPLY != 0 {
                    self.finish_task(ctx, tag & !TIMER_TASK_REPLY);
                }
            }
            Event::ChildExited { .. } => {}
            Event::Command(cmd) => self.on_command(ctx, cmd),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_frames_split_across_reads() {
        let mut bytes = encode_frame("plug P");
        bytes.extend(encode_frame("req 7"));
        let mut buf = Vec::new();
        let mut got = Vec::new();
        for b in bytes {
            buf.push(b);
            got.extend(decode_frames(&mut buf));
        }
        assert_eq!(got, vec!["plug P", "req 7"]);
        assert!(buf.is_empty());
    }

    #[test]
    fn handle_field_sets_respect_knowledge_limits() {
        let ip: IpAddr = "10.0.0.1".parse().unwrap();
        let src = SessionHandle {
            conn: 1,
            view: SessionView::Source(SourceView {
                source_service_name: "A".into(),
                source_address: ip,
                source_instance_id: 1,
                plug: "P".into(),
                plug_port: 40001,
                dest_service_name: "B".into(),
                dest_address: ip,
                socket: "S".into(),
                socket_port: 20010,
                new_socket_port: 40002,
            }),
            purpose: Purpose::Held,
        };
        let names: Vec<F> = src.known_fields().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, crate::wire::SOURCE_VIEW);
        let dst = SessionHandle {
            conn: 2,
            view: SessionView::Dest(DestView {
                source_address: ip,
                plug: None,
                plug_port: 40001,
                dest_service_name: "B".into(),
                dest_address: ip,
                dest_instance_id: 2,
                socket: "S".into(),
                socket_port: 20010,
                new_socket_port: 40002,
            }),
            purpose: Purpose::Serving,
        };
        let names: Vec<F> = dst.known_fields().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, crate::wire::DEST_VIEW);
        assert_eq!(dst.plug(), "-");
    }
}
