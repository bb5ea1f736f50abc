//! Loopback TCP driver.
//!
//! Hosts the same actors as the simulator over real sockets. Each logical
//! node is mapped to its own loopback address. One event loop owns every
//! actor and polls the listeners; helper threads connect and read, so
//! handlers still run one at a time. The accepting side of a session channel
//! reserves a fresh port `l` with a throwaway listener and tells the
//! connector about it in a one-line preamble before any payload.
//!
//! Both ends of every connection live in this process, so the driver knows
//! exactly how many bytes are still in the kernel and can tell when the
//! cluster is idle.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use socket2::{Domain, Socket, Type};

use super::observe::{
    MsgDirection, NetEvent, NetEventKind, Network, ProcessView, SessionChannel, TracedMessage,
};
use super::{
    Actor, ChannelKind, ConnId, Ctx, Endpoint, Event, NetError, NodeAddr, Pid, Process, SpawnError,
};
use crate::service_runtime::ServiceRuntime;
use crate::wire::{FrameDecoder, Message};

pub const PREAMBLE_KEY: &str = "session_port";

/// Longest time the loop sleeps before polling listeners again.
const POLL: Duration = Duration::from_millis(1);

#[derive(Debug, Clone)]
pub struct TcpConfig {
    /// Added to fixed ports below 1024 so that no privilege is needed.
    pub privileged_shift: u16,
    pub connect_timeout: Duration,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            privileged_shift: 10000,
            connect_timeout: Duration::from_secs(2),
        }
    }
}

pub fn preamble(session_port: u16) -> String {
    format!("{PREAMBLE_KEY}: {session_port}\n")
}

pub fn parse_preamble(line: &str) -> Option<u16> {
    line.trim_end_matches('\n')
        .strip_prefix(PREAMBLE_KEY)?
        .strip_prefix(": ")?
        .parse()
        .ok()
}

/// Reads the preamble one byte at a time so no payload is consumed.
fn read_preamble(stream: &mut TcpStream) -> std::io::Result<u16> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    while line.len() < 64 {
        if stream.read(&mut byte)? == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        line.push(byte[0]);
        if byte[0] == b'\n' {
            let text = String::from_utf8_lossy(&line);
            return parse_preamble(&text).ok_or_else(|| ErrorKind::InvalidData.into());
        }
    }
    Err(ErrorKind::InvalidData.into())
}

enum Io {
    Connected {
        token: u64,
        stream: TcpStream,
        peer_session_port: u16,
    },
    ConnectFailed {
        token: u64,
        error: NetError,
    },
    Data {
        conn: ConnId,
        data: Vec<u8>,
    },
    Eof {
        conn: ConnId,
    },
}

struct Accept {
    node: NodeAddr,
    port: u16,
    stream: TcpStream,
    peer: SocketAddr,
    reserve: Option<TcpListener>,
}

struct PendingConnect {
    pid: Pid,
    kind: ChannelKind,
    local: Endpoint,
    dst: Endpoint,
    real_local: SocketAddr,
    peer_pid: Pid,
}

struct Conn {
    pid: Pid,
    peer_pid: Pid,
    kind: ChannelKind,
    initiator: bool,
    stream: TcpStream,
    local: Endpoint,
    peer: Endpoint,
    real_local: SocketAddr,
    real_peer: SocketAddr,
    reserve: Option<TcpListener>,
    written: u64,
    read: u64,
    /// The far end has been released; further sends are dropped.
    peer_gone: bool,
    /// Cut by a link failure; a reset is on its way.
    aborted: bool,
    sent_trace: FrameDecoder,
    recv_trace: FrameDecoder,
}

struct Listener {
    pid: Pid,
    kind: ChannelKind,
    socket: TcpListener,
}

struct NodeState {
    real: Ipv4Addr,
    alive: bool,
    listeners: BTreeMap<u16, Listener>,
}

struct ProcSlot {
    node: NodeAddr,
    label: String,
    parent: Option<Pid>,
    alive: bool,
    process: Option<Process>,
    conns: BTreeSet<ConnId>,
}

/// Picks a `127.a.b.0/24` block per driver so concurrent clusters do not
/// collide.
fn loopback_block() -> (u8, u8) {
    static NEXT: AtomicU32 = AtomicU32::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    let h = std::process::id()
        .wrapping_mul(2_654_435_761)
        .wrapping_add(n.wrapping_mul(40_503));
    let a = 1 + (h % 250) as u8;
    let b = ((h / 250) % 256) as u8;
    (a, b)
}

pub struct TcpNet {
    cfg: TcpConfig,
    start: Instant,
    block: (u8, u8),
    tx: Sender<Io>,
    rx: Receiver<Io>,
    step_seq: u64,
    next_id: u64,
    nodes: BTreeMap<NodeAddr, NodeState>,
    by_real_ip: HashMap<Ipv4Addr, NodeAddr>,
    procs: BTreeMap<Pid, ProcSlot>,
    conns: BTreeMap<ConnId, Conn>,
    by_addrs: HashMap<(SocketAddr, SocketAddr), ConnId>,
    connecting: BTreeMap<u64, PendingConnect>,
    connector_pids: HashMap<SocketAddr, Pid>,
    timers: BinaryHeap<Reverse<(u64, u64)>>,
    timer_tags: BTreeMap<u64, (Pid, u64)>,
    notify: VecDeque<(Pid, Event)>,
    accepted: VecDeque<Accept>,
    broken: BTreeSet<(NodeAddr, NodeAddr)>,
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

fn reader(mut stream: TcpStream, conn: ConnId, tx: Sender<Io>) {
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => {
                let _ = tx.send(Io::Eof { conn });
                return;
            }
            Ok(n) => {
                if tx
                    .send(Io::Data {
                        conn,
                        data: buf[..n].to_vec(),
                    })
                    .is_err()
                {
                    return;
                }
            }
        }
    }
}

fn connect_error(e: &std::io::Error) -> NetError {
    match e.kind() {
        ErrorKind::ConnectionRefused => NetError::ConnectionRefused,
        ErrorKind::AddrInUse | ErrorKind::AddrNotAvailable => NetError::PortsExhausted,
        _ => NetError::Unreachable,
    }
}

impl TcpNet {
    pub fn new(cfg: TcpConfig) -> Self {
        let (tx, rx) = channel();
        TcpNet {
            cfg,
            start: Instant::now(),
            block: loopback_block(),
            tx,
            rx,
            step_seq: 0,
            next_id: 1,
            nodes: BTreeMap::new(),
            by_real_ip: HashMap::new(),
            procs: BTreeMap::new(),
            conns: BTreeMap::new(),
            by_addrs: HashMap::new(),
            connecting: BTreeMap::new(),
            connector_pids: HashMap::new(),
            timers: BinaryHeap::new(),
            timer_tags: BTreeMap::new(),
            notify: VecDeque::new(),
            accepted: VecDeque::new(),
            broken: BTreeSet::new(),
            log: Vec::new(),
            messages: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn add_node(&mut self, addr: NodeAddr) {
        if self.nodes.contains_key(&addr) {
            return;
        }
        let idx = self.nodes.len() as u8 + 1;
        let real = Ipv4Addr::new(127, self.block.0, self.block.1, idx);
        self.by_real_ip.insert(real, addr);
        self.nodes.insert(
            addr,
            NodeState {
                real,
                alive: true,
                listeners: BTreeMap::new(),
            },
        );
    }

    /// Loopback address standing in for `node`.
    pub fn real_ip(&self, node: NodeAddr) -> Option<Ipv4Addr> {
        self.nodes.get(&node).map(|n| n.real)
    }

    /// Socket port used for logical port `port`.
    pub fn real_port(&self, port: u16) -> u16 {
        if port < 1024 {
            port + self.cfg.privileged_shift
        } else {
            port
        }
    }

    fn logical(&self, real: SocketAddr) -> Endpoint {
        let node = match real.ip() {
            IpAddr::V4(ip) => self.by_real_ip.get(&ip).copied(),
            IpAddr::V6(_) => None,
        };
        Endpoint::new(node.unwrap_or(NodeAddr(real.ip())), real.port())
    }

    fn record(&mut self, kind: NetEventKind, src: Option<Endpoint>, dst: Option<Endpoint>) {
        self.log.push(NetEvent {
            seq: self.step_seq,
            time: self.now(),
            kind,
            src,
            dst,
        });
    }

    fn trace(
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
            time: self.now(),
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

    fn pair(&self, conn: &Conn) -> Option<&Conn> {
        self.by_addrs
            .get(&(conn.real_peer, conn.real_local))
            .and_then(|id| self.conns.get(id))
    }

    fn alive(&self, pid: Pid) -> bool {
        self.procs.get(&pid).is_some_and(|s| s.alive)
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
        let mut ctx = TcpCtx {
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

    fn register(&mut self, conn_id: ConnId, conn: Conn) {
        let reading = conn.stream.try_clone();
        self.by_addrs
            .insert((conn.real_local, conn.real_peer), conn_id);
        if let Some(s) = self.procs.get_mut(&conn.pid) {
            s.conns.insert(conn_id);
        }
        self.conns.insert(conn_id, conn);
        match reading {
            Ok(stream) => {
                let tx = self.tx.clone();
                thread::spawn(move || reader(stream, conn_id, tx));
            }
            Err(_) => {
                let _ = self.tx.send(Io::Eof { conn: conn_id });
            }
        }
    }

    /// Forgets one end and releases what it held.
    fn release(&mut self, conn_id: ConnId) {
        let Some(c) = self.conns.remove(&conn_id) else {
            return;
        };
        let _ = c.stream.shutdown(Shutdown::Both);
        self.by_addrs.remove(&(c.real_local, c.real_peer));
        if let Some(pair) = self.by_addrs.get(&(c.real_peer, c.real_local)).copied() {
            if let Some(p) = self.conns.get_mut(&pair) {
                p.peer_gone = true;
            }
        }
        if let Some(s) = self.procs.get_mut(&c.pid) {
            s.conns.remove(&conn_id);
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
            n.listeners.retain(|_, l| l.pid != pid);
        }
        for conn in conns {
            self.release(conn);
        }
        if notify_parent {
            if let Some(parent) = parent {
                if self.alive(parent) {
                    self.notify.push_back((parent, Event::ChildExited { pid }));
                }
            }
        }
    }

    fn poll_listeners(&mut self) {
        for (addr, n) in &self.nodes {
            if !n.alive {
                continue;
            }
            for (port, l) in &n.listeners {
                while let Ok((mut stream, peer)) = l.socket.accept() {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let reserve = match l.kind {
                        ChannelKind::Control => None,
                        ChannelKind::Session => {
                            let Ok(r) = TcpListener::bind((n.real, 0)) else {
                                continue;
                            };
                            let Ok(lport) = r.local_addr().map(|a| a.port()) else {
                                continue;
                            };
                            if stream.write_all(preamble(lport).as_bytes()).is_err() {
                                continue;
                            }
                            Some(r)
                        }
                    };
                    self.accepted.push_back(Accept {
                        node: *addr,
                        port: *port,
                        stream,
                        peer,
                        reserve,
                    });
                }
            }
        }
    }

    fn on_accept(&mut self, a: Accept) {
        let listener = self
            .nodes
            .get(&a.node)
            .filter(|n| n.alive)
            .and_then(|n| n.listeners.get(&a.port))
            .map(|l| (l.pid, l.kind));
        let (Some((pid, kind)), Ok(real_local)) = (listener, a.stream.local_addr()) else {
            let _ = a.stream.shutdown(Shutdown::Both);
            return;
        };
        let session_port = match &a.reserve {
            Some(r) => r.local_addr().map(|x| x.port()).unwrap_or(a.port),
            None => a.port,
        };
        let conn = self.fresh_id();
        let peer = self.logical(a.peer);
        let local = Endpoint::new(a.node, session_port);
        let peer_pid = self.connector_pids.get(&a.peer).copied().unwrap_or(0);
        self.register(
            conn,
            Conn {
                pid,
                peer_pid,
                kind,
                initiator: false,
                stream: a.stream,
                local,
                peer,
                real_local,
                real_peer: a.peer,
                reserve: a.reserve,
                written: 0,
                read: 0,
                peer_gone: false,
                aborted: false,
                sent_trace: FrameDecoder::new(),
                recv_trace: FrameDecoder::new(),
            },
        );
        self.record(NetEventKind::Accept, Some(peer), Some(local));
        self.dispatch(
            pid,
            Event::Accepted {
                listener_port: a.port,
                conn,
                peer,
                session_port,
            },
        );
    }

    fn on_io(&mut self, io: Io) {
        match io {
            Io::Connected {
                token,
                stream,
                peer_session_port,
            } => {
                let Some(pc) = self.connecting.remove(&token) else {
                    return;
                };
                let real_peer = stream.peer_addr();
                let (true, Ok(real_peer)) = (self.alive(pc.pid), real_peer) else {
                    let _ = stream.shutdown(Shutdown::Both);
                    self.connector_pids.remove(&pc.real_local);
                    return;
                };
                let conn = self.fresh_id();
                let peer = Endpoint::new(pc.dst.node, peer_session_port);
                self.register(
                    conn,
                    Conn {
                        pid: pc.pid,
                        peer_pid: pc.peer_pid,
                        kind: pc.kind,
                        initiator: true,
                        stream,
                        local: pc.local,
                        peer,
                        real_local: pc.real_local,
                        real_peer,
                        reserve: None,
                        written: 0,
                        read: 0,
                        peer_gone: false,
                        aborted: false,
                        sent_trace: FrameDecoder::new(),
                        recv_trace: FrameDecoder::new(),
                    },
                );
                self.record(NetEventKind::Connect, Some(peer), Some(pc.local));
                self.dispatch(
                    pc.pid,
                    Event::Connected {
                        token,
                        conn,
                        local_port: pc.local.port,
                        peer_session_port,
                    },
                );
            }
            Io::ConnectFailed { token, error } => {
                let Some(pc) = self.connecting.remove(&token) else {
                    return;
                };
                self.connector_pids.remove(&pc.real_local);
                self.record(NetEventKind::Drop, Some(pc.local), Some(pc.dst));
                self.dispatch(pc.pid, Event::ConnectFailed { token, error });
            }
            Io::Data { conn, data } => {
                let Some(c) = self.conns.get_mut(&conn) else {
                    return;
                };
                c.read += data.len() as u64;
                let (src, dst, pid, peer_pid) = (c.peer, c.local, c.pid, c.peer_pid);
                let frames = match c.kind {
                    ChannelKind::Control => c.recv_trace.push(&data),
                    ChannelKind::Session => Vec::new(),
                };
                self.record(NetEventKind::Deliver, Some(src), Some(dst));
                for f in frames {
                    self.trace(
                        MsgDirection::Delivered,
                        peer_pid,
                        pid,
                        f.raw,
                        f.message.ok(),
                    );
                }
                self.dispatch(pid, Event::Received { conn, data });
            }
            Io::Eof { conn } => {
                let Some(c) = self.conns.get(&conn) else {
                    return;
                };
                let (src, dst, pid) = (c.peer, c.local, c.pid);
                self.record(NetEventKind::Close, Some(src), Some(dst));
                self.release(conn);
                self.dispatch(pid, Event::Closed { conn });
            }
        }
    }

    fn next_timer(&self) -> Option<u64> {
        self.timers.peek().map(|Reverse((due, _))| *due)
    }

    fn fire_timer(&mut self) {
        let Some(Reverse((_, seq))) = self.timers.pop() else {
            return;
        };
        let Some((pid, tag)) = self.timer_tags.remove(&seq) else {
            return;
        };
        self.dispatch(pid, Event::Timer { tag });
    }

    /// Handles one unit of work, waiting for it until `deadline` at most.
    pub fn step_before(&mut self, deadline: u64) -> bool {
        loop {
            self.poll_listeners();
            if let Some((pid, event)) = self.notify.pop_front() {
                self.step_seq += 1;
                self.dispatch(pid, event);
                return true;
            }
            if let Some(a) = self.accepted.pop_front() {
                self.step_seq += 1;
                self.on_accept(a);
                return true;
            }
            if let Ok(io) = self.rx.try_recv() {
                self.step_seq += 1;
                self.on_io(io);
                return true;
            }
            let now = self.now();
            if let Some(due) = self.next_timer().filter(|d| *d <= deadline) {
                if due <= now {
                    self.step_seq += 1;
                    self.fire_timer();
                    return true;
                }
            }
            if now >= deadline {
                return false;
            }
            let until = self.next_timer().map_or(deadline, |d| d.min(deadline));
            let wait = Duration::from_millis(until.saturating_sub(now)).clamp(Duration::ZERO, POLL);
            match self.rx.recv_timeout(wait) {
                Ok(io) => {
                    self.step_seq += 1;
                    self.on_io(io);
                    return true;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("the driver holds a sender"),
            }
        }
    }

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
        self.notify.push_back((pid, Event::Start));
        pid
    }

    pub fn kill_node(&mut self, addr: NodeAddr) {
        let Some(n) = self.nodes.get_mut(&addr) else {
            return;
        };
        n.alive = false;
        n.listeners.clear();
        let pids: Vec<Pid> = self
            .procs
            .iter()
            .filter(|(_, s)| s.node == addr && s.alive)
            .map(|(p, _)| *p)
            .collect();
        for pid in pids {
            let slot = self.procs.get_mut(&pid).expect("listed above");
            slot.alive = false;
            let conns: Vec<ConnId> = slot.conns.iter().copied().collect();
            for conn in conns {
                if let Some(c) = self.conns.get(&conn) {
                    let (local, peer) = (c.local, c.peer);
                    self.record(NetEventKind::Drop, Some(local), Some(peer));
                }
                self.release(conn);
            }
        }
    }

    pub fn kill_process(&mut self, pid: Pid) {
        if self.alive(pid) {
            self.terminate(pid, true);
        }
    }

    /// Resets every connection between the two nodes and refuses new ones.
    pub fn break_link(&mut self, a: NodeAddr, b: NodeAddr) {
        self.broken.insert(link(a, b));
        for c in self.conns.values_mut() {
            if link(c.local.node, c.peer.node) == link(a, b) {
                c.aborted = true;
                let _ = c.stream.shutdown(Shutdown::Both);
            }
        }
    }

    pub fn heal_link(&mut self, a: NodeAddr, b: NodeAddr) {
        self.broken.remove(&link(a, b));
    }

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

    pub fn is_idle(&self) -> bool {
        self.notify.is_empty()
            && self.accepted.is_empty()
            && self.connecting.is_empty()
            && self.conns.values().all(|c| {
                !c.aborted
                    && self
                        .pair(c)
                        .is_some_and(|p| p.written == c.read && c.written == p.read)
            })
    }

    pub fn session_channels(&self) -> Vec<SessionChannel> {
        self.conns
            .values()
            .filter(|c| c.kind == ChannelKind::Session && c.initiator && !c.aborted)
            .filter_map(|c| {
                self.pair(c).filter(|p| !p.aborted).map(|p| SessionChannel {
                    source: c.local,
                    dest: p.local,
                    source_pid: c.pid,
                    dest_pid: p.pid,
                })
            })
            .collect()
    }

    pub fn bound_ports(&self) -> Vec<(Endpoint, Pid)> {
        let mut out = Vec::new();
        for (addr, n) in &self.nodes {
            for (port, l) in &n.listeners {
                out.push((Endpoint::new(*addr, *port), l.pid));
            }
        }
        for c in self.conns.values() {
            if c.initiator || c.reserve.is_some() {
                out.push((c.local, c.pid));
            }
        }
        out
    }
}

impl Drop for TcpNet {
    fn drop(&mut self) {
        for c in self.conns.values() {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    }
}

struct TcpCtx<'a> {
    net: &'a mut TcpNet,
    pid: Pid,
    exit: bool,
}

impl TcpCtx<'_> {
    fn node_addr(&self) -> NodeAddr {
        self.net.procs[&self.pid].node
    }
}

impl Ctx for TcpCtx<'_> {
    fn now(&self) -> u64 {
        self.net.now()
    }

    fn node(&self) -> NodeAddr {
        self.node_addr()
    }

    fn listen(&mut self, port: u16, kind: ChannelKind) -> Result<(), NetError> {
        if port == 0 {
            return Err(NetError::InvalidPort);
        }
        if self.is_port_bound(port) {
            return Err(NetError::PortInUse);
        }
        let node = self.node_addr();
        let real_port = self.net.real_port(port);
        let n = self.net.nodes.get_mut(&node).ok_or(NetError::NodeDown)?;
        let socket = TcpListener::bind((n.real, real_port)).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => NetError::PortInUse,
            _ => NetError::InvalidPort,
        })?;
        socket
            .set_nonblocking(true)
            .map_err(|_| NetError::InvalidPort)?;
        n.listeners.insert(
            port,
            Listener {
                pid: self.pid,
                kind,
                socket,
            },
        );
        Ok(())
    }

    fn unlisten(&mut self, port: u16) {
        let node = self.node_addr();
        if let Some(n) = self.net.nodes.get_mut(&node) {
            if n.listeners.get(&port).is_some_and(|l| l.pid == self.pid) {
                n.listeners.remove(&port);
            }
        }
    }

    fn is_port_bound(&self, port: u16) -> bool {
        let node = self.node_addr();
        self.net
            .nodes
            .get(&node)
            .is_some_and(|n| n.listeners.contains_key(&port))
            || self.net.conns.values().any(|c| {
                c.local.node == node && c.local.port == port && (c.initiator || c.reserve.is_some())
            })
    }

    fn connect(&mut self, dst: Endpoint, kind: ChannelKind) -> u64 {
        let token = self.net.fresh_id();
        let node = self.node_addr();
        let pid = self.pid;
        let fail = move |net: &mut TcpNet, error| {
            net.notify
                .push_back((pid, Event::ConnectFailed { token, error }))
        };
        let (Some(src_ip), Some(dst_ip)) = (self.net.real_ip(node), self.net.real_ip(dst.node))
        else {
            fail(self.net, NetError::Unreachable);
            return token;
        };
        let bound = Socket::new(Domain::IPV4, Type::STREAM, None).and_then(|s| {
            s.bind(&SocketAddr::new(IpAddr::V4(src_ip), 0).into())?;
            let local = s.local_addr()?.as_socket().ok_or(ErrorKind::InvalidData)?;
            Ok((s, local))
        });
        let Ok((socket, real_local)) = bound else {
            fail(self.net, NetError::PortsExhausted);
            return token;
        };
        let peer_pid = self
            .net
            .nodes
            .get(&dst.node)
            .and_then(|n| n.listeners.get(&dst.port))
            .map_or(0, |l| l.pid);
        self.net.connector_pids.insert(real_local, self.pid);
        self.net.connecting.insert(
            token,
            PendingConnect {
                pid: self.pid,
                kind,
                local: Endpoint::new(node, real_local.port()),
                dst,
                real_local,
                peer_pid,
            },
        );
        let tx = self.net.tx.clone();
        if self.net.broken.contains(&link(node, dst.node)) {
            let _ = tx.send(Io::ConnectFailed {
                token,
                error: NetError::Unreachable,
            });
            return token;
        }
        let target = SocketAddr::new(IpAddr::V4(dst_ip), self.net.real_port(dst.port));
        let timeout = self.net.cfg.connect_timeout;
        thread::spawn(move || {
            let outcome = socket
                .connect_timeout(&target.into(), timeout)
                .and_then(|()| {
                    let mut stream: TcpStream = socket.into();
                    stream.set_nodelay(true)?;
                    let l = match kind {
                        ChannelKind::Control => dst.port,
                        ChannelKind::Session => {
                            stream.set_read_timeout(Some(timeout))?;
                            let l = read_preamble(&mut stream)?;
                            stream.set_read_timeout(None)?;
                            l
                        }
                    };
                    Ok((stream, l))
                });
            let _ = tx.send(match outcome {
                Ok((stream, peer_session_port)) => Io::Connected {
                    token,
                    stream,
                    peer_session_port,
                },
                Err(e) => Io::ConnectFailed {
                    token,
                    error: connect_error(&e),
                },
            });
        });
        token
    }

    fn send(&mut self, conn: ConnId, data: Vec<u8>) {
        let Some(c) = self.net.conns.get_mut(&conn) else {
            return;
        };
        if c.peer_gone || c.aborted {
            return;
        }
        if c.stream.write_all(&data).is_err() {
            return;
        }
        c.written += data.len() as u64;
        let (from, to) = (c.pid, c.peer_pid);
        let frames = match c.kind {
            ChannelKind::Control => c.sent_trace.push(&data),
            ChannelKind::Session => Vec::new(),
        };
        for f in frames {
            self.net
                .trace(MsgDirection::Sent, from, to, f.raw, f.message.ok());
        }
    }

    fn close(&mut self, conn: ConnId) {
        if self.net.conns.get(&conn).is_some_and(|c| c.pid == self.pid) {
            self.net.release(conn);
        }
    }

    fn set_timer(&mut self, delay_ms: u64, tag: u64) {
        let seq = self.net.fresh_id();
        let due = self.net.now() + delay_ms;
        self.net.timers.push(Reverse((due, seq)));
        self.net.timer_tags.insert(seq, (self.pid, tag));
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
        let mut child = TcpCtx {
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

impl Network for TcpNet {
    fn transport_name(&self) -> &'static str {
        "tcp"
    }

    fn now(&self) -> u64 {
        TcpNet::now(self)
    }

    fn spawn_root(&mut self, node: NodeAddr, process: Process) -> Pid {
        TcpNet::spawn_root(self, node, process)
    }

    fn step_before(&mut self, deadline: u64) -> bool {
        TcpNet::step_before(self, deadline)
    }

    fn processes(&self) -> Box<dyn Iterator<Item = ProcessView<'_>> + '_> {
        Box::new(TcpNet::processes(self))
    }

    fn process(&self, pid: Pid) -> Option<&Process> {
        self.procs.get(&pid).and_then(|s| s.process.as_ref())
    }

    fn process_mut(&mut self, pid: Pid) -> Option<&mut Process> {
        self.procs.get_mut(&pid).and_then(|s| s.process.as_mut())
    }

    fn inject(&mut self, pid: Pid, event: Event) {
        self.notify.push_back((pid, event));
    }

    fn kill_node(&mut self, addr: NodeAddr) {
        TcpNet::kill_node(self, addr)
    }

    fn kill_process(&mut self, pid: Pid) {
        TcpNet::kill_process(self, pid)
    }

    fn break_link(&mut self, a: NodeAddr, b: NodeAddr) {
        TcpNet::break_link(self, a, b)
    }

    fn heal_link(&mut self, a: NodeAddr, b: NodeAddr) {
        TcpNet::heal_link(self, a, b)
    }

    fn events(&self) -> &[NetEvent] {
        &self.log
    }

    fn messages(&self) -> &[TracedMessage] {
        &self.messages
    }

    fn session_channels(&self) -> Vec<SessionChannel> {
        TcpNet::session_channels(self)
    }

    fn bound_ports(&self) -> Vec<(Endpoint, Pid)> {
        TcpNet::bound_ports(self)
    }

    fn is_idle(&self) -> bool {
        TcpNet::is_idle(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preamble_roundtrip() {
        assert_eq!(parse_preamble(&preamble(40123)), Some(40123));
        assert_eq!(parse_preamble("session_port:1\n"), None);
        assert_eq!(parse_preamble("port: 1\n"), None);
    }

    #[test]
    fn privileged_ports_are_shifted() {
        let net = TcpNet::new(TcpConfig::default());
        assert_eq!(net.real_port(80), 10080);
        assert_eq!(net.real_port(7000), 7000);
    }
}
