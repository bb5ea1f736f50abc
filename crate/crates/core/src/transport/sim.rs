//! Deterministic in-process network.
//!
//! A single ordered event queue drives every process. Events due at the same
//! simulated millisecond are ordered by a tie-break drawn from a seeded RNG,
//! so one seed always yields one trace while different seeds explore
//! different interleavings. Each channel direction is a FIFO: a delivery
//! event always pops the head of its queue, which keeps per-connection order
//! whatever the latency model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use super::observe::Network;
pub use super::observe::{
    MsgDirection, NetEvent, NetEventKind, ProcessView, SessionChannel, TracedMessage,
};
use super::{
    Actor, ChannelKind, ConnId, Ctx, Endpoint, Event, NetError, NodeAddr, Pid, Process, SpawnError,
};
use crate::service_runtime::ServiceRuntime;
use crate::wire::{FrameDecoder, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Constant(u64),
    Uniform { min: u64, max: u64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub latency: Latency,
    pub ephemeral_start: u16,
    pub ephemeral_end: u16,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latency: Latency::Constant(1),
            ephemeral_start: 40000,
            ephemeral_end: 65535,
        }
    }
}

#[derive(Debug)]
enum Segment {
    Established {
        token: u64,
        local_port: u16,
        peer_session_port: u16,
    },
    Data(Vec<u8>),
    Fin,
}

#[derive(Debug)]
struct ChanEnd {
    pid: Pid,
    conn: ConnId,
    local: Endpoint,
    owns_port: bool,
    open: bool,
}

#[derive(Debug)]
struct Channel {
    kind: ChannelKind,
    ends: [ChanEnd; 2],
    /// `queues[i]` travels toward `ends[i]`.
    queues: [VecDeque<Segment>; 2],
    aborted: bool,
    sent_trace: [FrameDecoder; 2],
    recv_trace: [FrameDecoder; 2],
}

#[derive(Debug)]
struct NodeState {
    alive: bool,
    listeners: BTreeMap<u16, (Pid, ChannelKind)>,
    ports: BTreeSet<u16>,
    next_ephemeral: u16,
}

#[derive(Debug)]
struct ProcSlot {
    node: NodeAddr,
    label: String,
    parent: Option<Pid>,
    alive: bool,
    process: Option<Process>,
    conns: BTreeSet<ConnId>,
}

#[derive(Debug)]
enum Pending {
    Deliver {
        chan: u64,
        to: usize,
    },
    ConnectArrive {
        token: u64,
        pid: Pid,
        src: Endpoint,
        dst: Endpoint,
        kind: ChannelKind,
    },
    Notify {
        pid: Pid,
        event: Event,
    },
    /// Connection reset seen by `pid`; `peer` is the far end.
    Reset {
        pid: Pid,
        conn: ConnId,
        local: Endpoint,
        peer: Endpoint,
    },
    Timer {
        pid: Pid,
        tag: u64,
    },
}

pub struct SimNet {
    cfg: SimConfig,
    now: u64,
    rng: ChaCha8Rng,
    sched_seq: u64,
    step_seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64, u64)>>,
    pending: BTreeMap<u64, Pending>,
    in_flight: usize,
    nodes: BTreeMap<NodeAddr, NodeState>,
    procs: BTreeMap<Pid, ProcSlot>,
    channels: BTreeMap<u64, Channel>,
    conns: BTreeMap<ConnId, (u64, usize)>,
    broken: BTreeSet<(NodeAddr, NodeAddr)>,
    next_id: u64,
    log: Vec<NetEvent>,
    messages: Vec<TracedMessage>,
}

fn link(a: NodeAddr, b: NodeAddr) -> (NodeAddr, NodeAddr) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl SimNet {
    pub fn new(cfg: SimConfig, seed: u64) -> Self {
        SimNet {
            cfg,
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sched_seq: 0,
            step_seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            in_flight: 0,
            nodes: BTreeMap::new(),
            procs: BTreeMap::new(),
            channels: BTreeMap::new(),
            conns: BTreeMap::new(),
            broken: BTreeSet::new(),
            next_id: 1,
            log: Vec::new(),
            messages: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn latency(&mut self) -> u64 {
        match self.cfg.latency {
            Latency::Constant(ms) => ms,
            Latency::Uniform { min, max } => self.rng.gen_range(min..=max.max(min)),
        }
    }

    fn schedule(&mut self, delay: u64, p: Pending) {
        if !matches!(p, Pending::Timer { .. }) {
            self.in_flight += 1;
        }
        let seq = self.sched_seq;
        self.sched_seq += 1;
        let tie: u64 = self.rng.gen();
        self.queue.push(Reverse((self.now + delay, tie, seq)));
        self.pending.insert(seq, p);
    }

    fn record(&mut self, kind: NetEventKind, src: Option<Endpoint>, dst: Option<Endpoint>) {
        self.log.push(NetEvent {
            seq: self.step_seq,
            time: self.now,
            kind,
            src,
            dst,
        });
    }

    // ---- cluster construction and fault injection ----

    pub fn add_node(&mut self, addr: NodeAddr) {
        let start = self.cfg.ephemeral_start;
        self.nodes.entry(addr).or_insert(NodeState {
            alive: true,
            listeners: BTreeMap::new(),
            ports: BTreeSet::new(),
            next_ephemeral: start,
        });
    }

    pub fn node_alive(&self, addr: NodeAddr) -> bool {
        self.nodes.get(&addr).is_some_and(|n| n.alive)
    }

    /// Hosts a top-level process on `node` and delivers [`Event::Start`].
    pub fn spawn_root(&mut self, node: NodeAddr, process: Process) -> Pid {
        self.add_node(node);
        let pid = self.fresh_id();
        let label = process.label(node);
        self.procs.insert(
            pid,
            ProcSlot {
                node,
                label,
                parent: None,
                alive: true,
                process: Some(process),
                conns: BTreeSet::new(),
            },
        );
        self.schedule(
            0,
            Pending::Notify {
                pid,
                event: Event::Start,
            },
        );
        pid
    }

    pub fn inject(&mut self, pid: Pid, event: Event) {
        self.schedule(0, Pending::Notify { pid, event });
    }

    /// Kills every process on the node and resets all its connections.
    pub fn kill_node(&mut self, addr: NodeAddr) {
        let Some(node) = self.nodes.get_mut(&addr) else {
            return;
        };
        node.alive = false;
        node.listeners.clear();
        let pids: Vec<Pid> = self
            .procs
            .iter()
            .filter(|(_, s)| s.node == addr && s.alive)
            .map(|(p, _)| *p)
            .collect();
        for pid in &pids {
            if let Some(slot) = self.procs.get_mut(pid) {
                slot.alive = false;
            }
        }
        let chans: Vec<u64> = self
            .channels
            .iter()
            .filter(|(_, c)| !c.aborted && c.ends.iter().any(|e| e.local.node == addr))
            .map(|(id, _)| *id)
            .collect();
        for c in chans {
            self.abort_channel(c);
        }
    }

    /// Kills a single process as if by an external signal; its parent sees
    /// [`Event::ChildExited`].
    pub fn kill_process(&mut self, pid: Pid) {
        if self.procs.get(&pid).is_some_and(|s| s.alive) {
            self.terminate(pid, true);
        }
    }

    pub fn break_link(&mut self, a: NodeAddr, b: NodeAddr) {
        self.broken.insert(link(a, b));
        let chans: Vec<u64> = self
            .channels
            .iter()
            .filter(|(_, c)| {
                !c.aborted && link(c.ends[0].local.node, c.ends[1].local.node) == link(a, b)
            })
            .map(|(id, _)| *id)
            .collect();
        for c in chans {
            self.abort_channel(c);
        }
    }

    pub fn heal_link(&mut self, a: NodeAddr, b: NodeAddr) {
        self.broken.remove(&link(a, b));
    }

    // ---- inspection ----

    pub fn processes(&self) -> impl Iterator<Item = ProcessView<'_>> {
        self.procs.iter().filter_map(|(pid, s)| {
            s.process.as_ref().map(|p| ProcessView {
                pid: *pid,
                node: s.node,
                label: &s.label,
                alive: s.alive,
                process: p,
            })
        })
    }

    pub fn process(&self, pid: Pid) -> Option<&Process> {
        self.procs.get(&pid).and_then(|s| s.process.as_ref())
    }

    pub fn process_mut(&mut self, pid: Pid) -> Option<&mut Process> {
        self.procs.get_mut(&pid).and_then(|s| s.process.as_mut())
    }

    pub fn is_alive(&self, pid: Pid) -> bool {
        self.procs.get(&pid).is_some_and(|s| s.alive)
    }

    pub fn label(&self, pid: Pid) -> Option<&str> {
        self.procs.get(&pid).map(|s| s.label.as_str())
    }

    pub fn events(&self) -> &[NetEvent] {
        &self.log
    }

    pub fn messages(&self) -> &[TracedMessage] {
        &self.messages
    }

    /// True when no delivery, connect or notification is in flight.
    pub fn is_idle(&self) -> bool {
        self.in_flight == 0
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Data-plane channels with both ends open.
    pub fn session_channels(&self) -> Vec<SessionChannel> {
        self.channels
            .values()
            .filter(|c| {
                c.kind == ChannelKind::Session && !c.aborted && c.ends.iter().all(|e| e.open)
            })
            .map(|c| SessionChannel {
                source: c.ends[0].local,
                dest: c.ends[1].local,
                source_pid: c.ends[0].pid,
                dest_pid: c.ends[1].pid,
            })
            .collect()
    }

    /// Every `(node, port)` currently held, with the holder; listeners and
    /// connection-owned ports alike. A port held twice appears twice.
    pub fn bound_ports(&self) -> Vec<(Endpoint, Pid)> {
        let mut out = Vec::new();
        for (addr, n) in &self.nodes {
            for (port, (pid, _)) in &n.listeners {
                out.push((Endpoint::new(*addr, *port), *pid));
            }
        }
        for c in self.channels.values() {
            for e in &c.ends {
                if e.open && e.owns_port {
                    out.push((e.local, e.pid));
                }
            }
        }
        out
    }

    // ---- execution ----

    /// Processes the next queued event.
    pub fn step(&mut self) -> NetEvent {
        self.step_seq += 1;
        let Some(Reverse((time, _, seq))) = self.queue.pop() else {
            return NetEvent {
                seq: self.step_seq,
                time: self.now,
                kind: NetEventKind::Idle,
                src: None,
                dst: None,
            };
        };
        self.now = self.now.max(time);
        let p = self
            .pending
            .remove(&seq)
            .expect("queued event has a payload");
        if !matches!(p, Pending::Timer { .. }) {
            self.in_flight -= 1;
        }
        let before = self.log.len();
        match p {
            Pending::Deliver { chan, to } => self.deliver(chan, to),
            Pending::ConnectArrive {
                token,
                pid,
                src,
                dst,
                kind,
            } => self.connect_arrive(token, pid, src, dst, kind),
            Pending::Notify { pid, event } => self.dispatch(pid, event),
            Pending::Reset {
                pid,
                conn,
                local,
                peer,
            } => {
                self.record(NetEventKind::Close, Some(peer), Some(local));
                self.dispatch(pid, Event::Closed { conn });
            }
            Pending::Timer { pid, tag } => {
                self.dispatch(pid, Event::Timer { tag });
                return NetEvent {
                    seq: self.step_seq,
                    time: self.now,
                    kind: NetEventKind::Timer,
                    src: None,
                    dst: None,
                };
            }
        }
        self.log.get(before).cloned().unwrap_or(NetEvent {
            seq: self.step_seq,
            time: self.now,
            kind: NetEventKind::Deliver,
            src: None,
            dst: None,
        })
    }

    /// Runs every event due at or before `t`, then advances the clock to `t`.
    pub fn run_until(&mut self, t: u64, mut after_step: impl FnMut(&mut SimNet)) {
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            self.step();
            after_step(self);
        }
        self.now = self.now.max(t);
    }

    fn dispatch(&mut self, pid: Pid, event: Event) {
        let Some(slot) = self.procs.get_mut(&pid) else {
            return;
        };
        if !slot.alive {
            return;
        }
        let Some(mut process) = slot.process.take() else {
            return;
        };
        let mut ctx = SimCtx {
            net: self,
            pid,
            exit: false,
        };
        process.handle(event, &mut ctx);
        let exit = ctx.exit;
        if let Some(slot) = self.procs.get_mut(&pid) {
            slot.process = Some(process);
        }
        if exit {
            self.terminate(pid, true);
        }
    }

    fn deliver(&mut self, chan: u64, to: usize) {
        let Some(c) = self.channels.get_mut(&chan) else {
            return;
        };
        if c.aborted {
            return;
        }
        let Some(seg) = c.queues[to].pop_front() else {
            return;
        };
        let from = 1 - to;
        let (src, dst) = (c.ends[from].local, c.ends[to].local);
        let end_pid = c.ends[to].pid;
        let end_conn = c.ends[to].conn;
        let end_open = c.ends[to].open && self.procs.get(&end_pid).is_some_and(|s| s.alive);
        if !end_open {
            self.record(NetEventKind::Drop, Some(src), Some(dst));
            return;
        }
        match seg {
            Segment::Established {
                token,
                local_port,
                peer_session_port,
            } => {
                self.record(NetEventKind::Connect, Some(src), Some(dst));
                self.dispatch(
                    end_pid,
                    Event::Connected {
                        token,
                        conn: end_conn,
                        local_port,
                        peer_session_port,
                    },
                );
            }
            Segment::Data(data) => {
                self.record(NetEventKind::Deliver, Some(src), Some(dst));
                let c = self.channels.get_mut(&chan).expect("checked above");
                if c.kind == ChannelKind::Control {
                    let frames = c.recv_trace[from].push(&data);
                    let from_pid = c.ends[from].pid;
                    for f in frames {
                        self.trace_message(
                            MsgDirection::Delivered,
                            from_pid,
                            end_pid,
                            f.raw,
                            f.message.ok(),
                        );
                    }
                }
                self.dispatch(
                    end_pid,
                    Event::Received {
                        conn: end_conn,
                        data,
                    },
                );
            }
            Segment::Fin => {
                self.record(NetEventKind::Close, Some(src), Some(dst));
                self.release_end(chan, to);
                self.dispatch(end_pid, Event::Closed { conn: end_conn });
            }
        }
    }

    fn trace_message(
        &mut self,
        direction: MsgDirection,
        from_pid: Pid,
        to_pid: Pid,
        raw: Vec<u8>,
        message: Option<Message>,
    ) {
        let label = |pid: Pid| {
            self.procs
                .get(&pid)
                .map(|s| s.label.clone())
                .unwrap_or_else(|| format!("pid{pid}"))
        };
        let entry = TracedMessage {
            seq: self.step_seq,
            time: self.now,
            direction,
            from_pid,
            to_pid,
            from: label(from_pid),
            to: label(to_pid),
            raw,
            message,
        };
        self.messages.push(entry);
    }

    fn allocate_port(&mut self, node: NodeAddr) -> Result<u16, NetError> {
        let (start, end) = (self.cfg.ephemeral_start, self.cfg.ephemeral_end);
        let n = self.nodes.get_mut(&node).ok_or(NetError::NodeDown)?;
        let span = u32::from(end - start) + 1;
        for _ in 0..span {
            let candidate = n.next_ephemeral;
            n.next_ephemeral = if candidate >= end {
                start
            } else {
                candidate + 1
            };
            if !n.ports.contains(&candidate) {
                n.ports.insert(candidate);
                return Ok(candidate);
            }
        }
        Err(NetError::PortsExhausted)
    }

    fn release_port(&mut self, ep: Endpoint) {
        if let Some(n) = self.nodes.get_mut(&ep.node) {
            if !n.listeners.contains_key(&ep.port) {
                n.ports.remove(&ep.port);
            }
        }
    }

    /// Marks one end closed and frees what it held.
    fn release_end(&mut self, chan: u64, side: usize) {
        let Some(c) = self.channels.get_mut(&chan) else {
            return;
        };
        let end = &mut c.ends[side];
        if !end.open {
            return;
        }
        end.open = false;
        let (pid, conn, local, owns) = (end.pid, end.conn, end.local, end.owns_port);
        if c.ends.iter().all(|e| !e.open) {
            // fully closed channels are kept only while segments are queued
            if c.queues.iter().all(VecDeque::is_empty) {
                self.channels.remove(&chan);
            }
        }
        self.conns.remove(&conn);
        if owns {
            self.release_port(local);
        }
        if let Some(slot) = self.procs.get_mut(&pid) {
            slot.conns.remove(&conn);
        }
    }

    fn abort_channel(&mut self, chan: u64) {
        let Some(c) = self.channels.get_mut(&chan) else {
            return;
        };
        if c.aborted {
            return;
        }
        c.aborted = true;
        c.queues.iter_mut().for_each(VecDeque::clear);
        let ends: Vec<(usize, Pid, ConnId, bool)> = c
            .ends
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.pid, e.conn, e.open))
            .collect();
        let locals = [c.ends[0].local, c.ends[1].local];
        self.record(NetEventKind::Drop, Some(locals[0]), Some(locals[1]));
        for (side, pid, conn, open) in ends {
            if !open {
                continue;
            }
            self.release_end(chan, side);
            if self.procs.get(&pid).is_some_and(|s| s.alive) {
                let delay = self.latency();
                let (local, peer) = (locals[side], locals[1 - side]);
                self.schedule(
                    delay,
                    Pending::Reset {
                        pid,
                        conn,
                        local,
                        peer,
                    },
                );
            }
        }
        self.channels.remove(&chan);
    }

    fn close_conn(&mut self, conn: ConnId) {
        let Some(&(chan, side)) = self.conns.get(&conn) else {
            return;
        };
        let other = 1 - side;
        self.release_end(chan, side);
        let delay = self.latency();
        if let Some(c) = self.channels.get_mut(&chan) {
            if !c.aborted && c.ends[other].open {
                c.queues[other].push_back(Segment::Fin);
                self.schedule(delay, Pending::Deliver { chan, to: other });
            }
        }
    }

    fn terminate(&mut self, pid: Pid, notify_parent: bool) {
        let Some(slot) = self.procs.get_mut(&pid) else {
            return;
        };
        slot.alive = false;
        let node = slot.node;
        let parent = slot.parent;
        let conns: Vec<ConnId> = slot.conns.iter().copied().collect();
        if let Some(n) = self.nodes.get_mut(&node) {
            let ports: Vec<u16> = n
                .listeners
                .iter()
                .filter(|(_, (p, _))| *p == pid)
                .map(|(port, _)| *port)
                .collect();
            for port in ports {
                n.listeners.remove(&port);
                n.ports.remove(&port);
            }
        }
        for conn in conns {
            self.close_conn(conn);
        }
        if notify_parent {
            if let Some(parent) = parent {
                if self.procs.get(&parent).is_some_and(|s| s.alive) {
                    self.schedule(
                        0,
                        Pending::Notify {
                            pid: parent,
                            event: Event::ChildExited { pid },
                        },
                    );
                }
            }
        }
    }

    fn connect_arrive(
        &mut self,
        token: u64,
        pid: Pid,
        src: Endpoint,
        dst: Endpoint,
        kind: ChannelKind,
    ) {
        if !self.procs.get(&pid).is_some_and(|s| s.alive) {
            self.release_port(src);
            return;
        }
        let failure = if self.broken.contains(&link(src.node, dst.node)) {
            Some(NetError::Unreachable)
        } else if !self.node_alive(dst.node) {
            Some(NetError::NodeDown)
        } else {
            match self.nodes[&dst.node].listeners.get(&dst.port) {
                Some((_, k)) if *k == kind => None,
                _ => Some(NetError::ConnectionRefused),
            }
        };
        if let Some(error) = failure {
            self.record(NetEventKind::Drop, Some(src), Some(dst));
            self.release_port(src);
            let delay = self.latency();
            self.schedule(
                delay,
                Pending::Notify {
                    pid,
                    event: Event::ConnectFailed { token, error },
                },
            );
            return;
        }
        let listener_pid = self.nodes[&dst.node].listeners[&dst.port].0;
        let session_port = match kind {
            ChannelKind::Control => dst.port,
            ChannelKind::Session => match self.allocate_port(dst.node) {
                Ok(p) => p,
                Err(error) => {
                    self.release_port(src);
                    let delay = self.latency();
                    self.schedule(
                        delay,
                        Pending::Notify {
                            pid,
                            event: Event::ConnectFailed { token, error },
                        },
                    );
                    return;
                }
            },
        };
        let chan = self.fresh_id();
        let src_conn = self.fresh_id();
        let dst_conn = self.fresh_id();
        let dest_local = Endpoint::new(dst.node, session_port);
        let mut channel = Channel {
            kind,
            ends: [
                ChanEnd {
                    pid,
                    conn: src_conn,
                    local: src,
                    owns_port: true,
                    open: true,
                },
                ChanEnd {
                    pid: listener_pid,
                    conn: dst_conn,
                    local: dest_local,
                    owns_port: kind == ChannelKind::Session,
                    open: true,
                },
            ],
            queues: [VecDeque::new(), VecDeque::new()],
            aborted: false,
            sent_trace: [FrameDecoder::new(), FrameDecoder::new()],
            recv_trace: [FrameDecoder::new(), FrameDecoder::new()],
        };
        channel.queues[0].push_back(Segment::Established {
            token,
            local_port: src.port,
            peer_session_port: session_port,
        });
        self.channels.insert(chan, channel);
        self.conns.insert(src_conn, (chan, 0));
        self.conns.insert(dst_conn, (chan, 1));
        if let Some(s) = self.procs.get_mut(&pid) {
            s.conns.insert(src_conn);
        }
        if let Some(s) = self.procs.get_mut(&listener_pid) {
            s.conns.insert(dst_conn);
        }
        let delay = self.latency();
        self.schedule(delay, Pending::Deliver { chan, to: 0 });
        self.record(NetEventKind::Accept, Some(src), Some(dest_local));
        self.dispatch(
            listener_pid,
            Event::Accepted {
                listener_port: dst.port,
                conn: dst_conn,
                peer: src,
                session_port,
            },
        );
    }
}

struct SimCtx<'a> {
    net: &'a mut SimNet,
    pid: Pid,
    exit: bool,
}

impl SimCtx<'_> {
    fn node_addr(&self) -> NodeAddr {
        self.net.procs[&self.pid].node
    }
}

impl Ctx for SimCtx<'_> {
    fn now(&self) -> u64 {
        self.net.now
    }

    fn node(&self) -> NodeAddr {
        self.node_addr()
    }

    fn listen(&mut self, port: u16, kind: ChannelKind) -> Result<(), NetError> {
        if port == 0 {
            return Err(NetError::InvalidPort);
        }
        let node = self.node_addr();
        let n = self.net.nodes.get_mut(&node).ok_or(NetError::NodeDown)?;
        if n.ports.contains(&port) {
            return Err(NetError::PortInUse);
        }
        n.ports.insert(port);
        n.listeners.insert(port, (self.pid, kind));
        Ok(())
    }

    fn unlisten(&mut self, port: u16) {
        let node = self.node_addr();
        if let Some(n) = self.net.nodes.get_mut(&node) {
            if n.listeners.get(&port).is_some_and(|(p, _)| *p == self.pid) {
                n.listeners.remove(&port);
                n.ports.remove(&port);
            }
        }
    }

    fn is_port_bound(&self, port: u16) -> bool {
        self.net
            .nodes
            .get(&self.node_addr())
            .is_some_and(|n| n.ports.contains(&port))
    }

    fn connect(&mut self, dst: Endpoint, kind: ChannelKind) -> u64 {
        let token = self.net.fresh_id();
        let node = self.node_addr();
        match self.net.allocate_port(node) {
            Ok(m) => {
                let delay = self.net.latency();
                self.net.schedule(
                    delay,
                    Pending::ConnectArrive {
                        token,
                        pid: self.pid,
                        src: Endpoint::new(node, m),
                        dst,
                        kind,
                    },
                );
            }
            Err(error) => {
                self.net.schedule(
                    0,
                    Pending::Notify {
                        pid: self.pid,
                        event: Event::ConnectFailed { token, error },
                    },
                );
            }
        }
        token
    }

    fn send(&mut self, conn: ConnId, data: Vec<u8>) {
        let Some(&(chan, side)) = self.net.conns.get(&conn) else {
            return;
        };
        let other = 1 - side;
        let Some(c) = self.net.channels.get_mut(&chan) else {
            return;
        };
        if c.aborted || !c.ends[side].open || !c.ends[other].open {
            return;
        }
        let traced = if c.kind == ChannelKind::Control {
            let frames = c.sent_trace[side].push(&data);
            Some((c.ends[side].pid, c.ends[other].pid, frames))
        } else {
            None
        };
        c.queues[other].push_back(Segment::Data(data));
        if let Some((from, to, frames)) = traced {
            for f in frames {
                self.net
                    .trace_message(MsgDirection::Sent, from, to, f.raw, f.message.ok());
            }
        }
        let delay = self.net.latency();
        self.net
            .schedule(delay, Pending::Deliver { chan, to: other });
    }

    fn close(&mut self, conn: ConnId) {
        self.net.close_conn(conn);
    }

    fn set_timer(&mut self, delay_ms: u64, tag: u64) {
        self.net
            .schedule(delay_ms, Pending::Timer { pid: self.pid, tag });
    }

    fn spawn(&mut self, mut runtime: ServiceRuntime) -> Result<Pid, SpawnError> {
        let pid = self.net.fresh_id();
        let node = self.node_addr();
        self.net.procs.insert(
            pid,
            ProcSlot {
                node,
                label: format!(
                    "{}#{}@{node}",
                    runtime.service_name(),
                    runtime.instance_id()
                ),
                parent: Some(self.pid),
                alive: true,
                process: None,
                conns: BTreeSet::new(),
            },
        );
        let mut child = SimCtx {
            net: &mut *self.net,
            pid,
            exit: false,
        };
        match runtime.start(&mut child) {
            Ok(()) => {
                self.net.procs.get_mut(&pid).expect("just inserted").process =
                    Some(Process::Runtime(Box::new(runtime)));
                Ok(pid)
            }
            Err(e) => {
                self.net.terminate(pid, false);
                self.net.procs.remove(&pid);
                Err(e)
            }
        }
    }

    fn kill(&mut self, pid: Pid) -> bool {
        let owned = self
            .net
            .procs
            .get(&pid)
            .is_some_and(|s| s.alive && s.parent == Some(self.pid));
        if owned {
            self.net.terminate(pid, false);
        }
        owned
    }

    fn exit(&mut self) {
        self.exit = true;
    }
}

impl Network for SimNet {
    fn transport_name(&self) -> &'static str {
        "sim"
    }

    fn now(&self) -> u64 {
        SimNet::now(self)
    }

    fn spawn_root(&mut self, node: NodeAddr, process: Process) -> Pid {
        SimNet::spawn_root(self, node, process)
    }

    fn step_before(&mut self, deadline: u64) -> bool {
        if self.next_event_time().is_some_and(|next| next <= deadline) {
            self.step();
            true
        } else {
            self.now = self.now.max(deadline);
            false
        }
    }

    fn processes(&self) -> Box<dyn Iterator<Item = ProcessView<'_>> + '_> {
        Box::new(SimNet::processes(self))
    }

    fn process(&self, pid: Pid) -> Option<&Process> {
        SimNet::process(self, pid)
    }

    fn process_mut(&mut self, pid: Pid) -> Option<&mut Process> {
        SimNet::process_mut(self, pid)
    }

    fn inject(&mut self, pid: Pid, event: Event) {
        SimNet::inject(self, pid, event)
    }

    fn kill_node(&mut self, addr: NodeAddr) {
        SimNet::kill_node(self, addr)
    }

    fn kill_process(&mut self, pid: Pid) {
        SimNet::kill_process(self, pid)
    }

    fn break_link(&mut self, a: NodeAddr, b: NodeAddr) {
        SimNet::break_link(self, a, b)
    }

    fn heal_link(&mut self, a: NodeAddr, b: NodeAddr) {
        SimNet::heal_link(self, a, b)
    }

    fn events(&self) -> &[NetEvent] {
        SimNet::events(self)
    }

    fn messages(&self) -> &[TracedMessage] {
        SimNet::messages(self)
    }

    fn session_channels(&self) -> Vec<SessionChannel> {
        SimNet::session_channels(self)
    }

    fn bound_ports(&self) -> Vec<(Endpoint, Pid)> {
        SimNet::bound_ports(self)
    }

    fn is_idle(&self) -> bool {
        SimNet::is_idle(self)
    }
}
