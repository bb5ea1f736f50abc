//! What a driver exposes to the harness: its event log, traced control
//! messages and the processes it hosts.

use std::fmt;

use super::{Endpoint, Event, NodeAddr, Pid, Process};
use crate::wire::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NetEventKind {
    Deliver,
    Connect,
    Accept,
    Close,
    Drop,
    Timer,
    Idle,
}

impl NetEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetEventKind::Deliver => "deliver",
            NetEventKind::Connect => "connect",
            NetEventKind::Accept => "accept",
            NetEventKind::Close => "close",
            NetEventKind::Drop => "drop",
            NetEventKind::Timer => "timer",
            NetEventKind::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetEvent {
    pub seq: u64,
    pub time: u64,
    pub kind: NetEventKind,
    pub src: Option<Endpoint>,
    pub dst: Option<Endpoint>,
}

impl fmt::Display for NetEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ep = |e: &Option<Endpoint>| e.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
        write!(
            f,
            "event {} {} {} {} {}",
            self.seq,
            self.time,
            self.kind.as_str(),
            ep(&self.src),
            ep(&self.dst)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgDirection {
    Sent,
    Delivered,
}

/// One SSMMP message observed on a control channel.
#[derive(Debug, Clone)]
pub struct TracedMessage {
    pub seq: u64,
    pub time: u64,
    pub direction: MsgDirection,
    pub from_pid: Pid,
    pub to_pid: Pid,
    pub from: String,
    pub to: String,
    pub raw: Vec<u8>,
    pub message: Option<Message>,
}

/// Read-only view of a hosted process.
pub struct ProcessView<'a> {
    pub pid: Pid,
    pub node: NodeAddr,
    pub label: &'a str,
    pub alive: bool,
    pub process: &'a Process,
}

/// An open data-plane channel as seen by the transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionChannel {
    pub source: Endpoint,
    pub dest: Endpoint,
    pub source_pid: Pid,
    pub dest_pid: Pid,
}

/// Inspection and fault injection common to the simulated and TCP drivers.
pub trait Network {
    /// `"sim"` or `"tcp"`.
    fn transport_name(&self) -> &'static str;
    fn now(&self) -> u64;
    /// Hosts a top-level process on `node` and delivers [`Event::Start`].
    fn spawn_root(&mut self, node: NodeAddr, process: Process) -> Pid;
    /// Handles one unit of pending work due no later than `deadline`. Returns
    /// false, with the clock at `deadline`, once there is none.
    fn step_before(&mut self, deadline: u64) -> bool;
    fn processes(&self) -> Box<dyn Iterator<Item = ProcessView<'_>> + '_>;
    fn process(&self, pid: Pid) -> Option<&Process>;
    fn process_mut(&mut self, pid: Pid) -> Option<&mut Process>;
    fn inject(&mut self, pid: Pid, event: Event);
    fn kill_node(&mut self, addr: NodeAddr);
    fn kill_process(&mut self, pid: Pid);
    fn break_link(&mut self, a: NodeAddr, b: NodeAddr);
    fn heal_link(&mut self, a: NodeAddr, b: NodeAddr);
    fn events(&self) -> &[NetEvent];
    fn messages(&self) -> &[TracedMessage];
    /// Data-plane channels with both ends open.
    fn session_channels(&self) -> Vec<SessionChannel>;
    /// Every `(node, port)` currently held, with the holder. A port held
    /// twice appears twice.
    fn bound_ports(&self) -> Vec<(Endpoint, Pid)>;
    /// True when nothing sent has yet to be received.
    fn is_idle(&self) -> bool;
}
