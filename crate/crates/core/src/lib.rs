//! SSMMP: a service mesh management protocol without sidecars.
//!
//! The crate provides the wire codec, the abstract application graph, the
//! three protocol actors (Manager, agent, service runtime), a pluggable
//! transport with a deterministic simulated network and a loopback-TCP mode,
//! and a scenario harness that drives whole clusters and checks protocol
//! invariants.

pub mod agent;
pub mod graph;
pub mod harness;
pub mod manager;
pub mod service_runtime;
pub mod transport;
pub mod wire;
