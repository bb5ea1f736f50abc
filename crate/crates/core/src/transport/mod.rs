//! Connectivity contract shared by the protocol actors.
//!
//! Actors never touch sockets. They react to [`Event`]s and act through the
//! [`Ctx`] handed to them, which is implemented both by the deterministic
//! simulator ([`sim`]) and by the loopback-TCP driver ([`tcp`]).

mod observe;
mod process;
pub mod sim;
pub mod tcp;

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use thiserror::Error;

pub use observe::{
    MsgDirection, NetEvent, NetEventKind, Network, ProcessView, SessionChannel, TracedMessage,
};
pub use process::{Actor, Process};

use crate::service_runtime::ServiceRuntime;

/// Network address of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeAddr(pub IpAddr);

impl NodeAddr {
    pub fn ip(self) -> IpAddr {
        self.0
    }
}

impl fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for NodeAddr {
    type Err = std::net::AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(NodeAddr)
    }
}

impl From<IpAddr> for NodeAddr {
    fn from(ip: IpAddr) -> Self {
        NodeAddr(ip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub node: NodeAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(node: NodeAddr, port: u16) -> Self {
        Endpoint { node, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node.0 {
            IpAddr::V6(a) => write!(f, "[{a}]:{}", self.port),
            IpAddr::V4(a) => write!(f, "{a}:{}", self.port),
        }
    }
}

pub type ConnId = u64;
pub type Pid = u64;

/// Control channels carry SSMMP messages; session channels are the data
/// plane of communication sessions and get a fresh per-session port on
/// accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    Control,
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("connection refused")]
    ConnectionRefused,
    #[error("node down")]
    NodeDown,
    #[error("link broken")]
    Unreachable,
    #[error("port already in use")]
    PortInUse,
    #[error("invalid port")]
    InvalidPort,
    #[error("no free port")]
    PortsExhausted,
}

/// Harness-injected stimuli.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// A user request arriving at a gateway instance.
    UserRequest { payload: Vec<u8> },
    /// Open a session on `plug` and keep it open.
    OpenHeld { plug: String },
    /// Close the oldest held session on `plug`.
    CloseHeld { plug: String },
    /// Switch the behavior script in or out of fault mode.
    SetFault(bool),
    /// Ask the Manager to shut an instance down.
    Shutdown {
        service: String,
        instance_id: u64,
        hard: bool,
    },
    /// Ask the Manager to start one more instance of a service.
    Scale {
        service: String,
        node: Option<NodeAddr>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Start,
    Accepted {
        listener_port: u16,
        conn: ConnId,
        peer: Endpoint,
        /// Fresh port dedicated to this connection on the accepting node
        /// (equal to `listener_port` for control channels).
        session_port: u16,
    },
    Connected {
        token: u64,
        conn: ConnId,
        local_port: u16,
        peer_session_port: u16,
    },
    ConnectFailed {
        token: u64,
        error: NetError,
    },
    Received {
        conn: ConnId,
        data: Vec<u8>,
    },
    Closed {
        conn: ConnId,
    },
    Timer {
        tag: u64,
    },
    ChildExited {
        pid: Pid,
    },
    Command(Command),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpawnError {
    #[error("bind failed on port {0}")]
    BindFailure(u16),
    #[error("spawn failed: {0}")]
    Other(String),
}

/// What an actor may do while handling an event.
pub trait Ctx {
    /// Milliseconds since the cluster started.
    fn now(&self) -> u64;
    fn node(&self) -> NodeAddr;
    fn listen(&mut self, port: u16, kind: ChannelKind) -> Result<(), NetError>;
    fn unlisten(&mut self, port: u16);
    fn is_port_bound(&self, port: u16) -> bool;
    /// Starts an asynchronous connect; the outcome arrives as
    /// [`Event::Connected`] or [`Event::ConnectFailed`] carrying the returned
    /// token.
    fn connect(&mut self, dst: Endpoint, kind: ChannelKind) -> u64;
    fn send(&mut self, conn: ConnId, data: Vec<u8>);
    fn close(&mut self, conn: ConnId);
    fn set_timer(&mut self, delay_ms: u64, tag: u64);
    /// Starts a service instance process on this node. The runtime binds its
    /// listeners before this returns.
    fn spawn(&mut self, runtime: ServiceRuntime) -> Result<Pid, SpawnError>;
    /// Kills a child process; returns once it is confirmed dead.
    fn kill(&mut self, pid: Pid) -> bool;
    /// Terminates the calling process after the current handler returns.
    fn exit(&mut self);
}
