//! Scenario runner: boots a Manager and agents, plays a timeline of user
//! traffic and failures, checks global invariants at every quiescent point,
//! and renders a trace report.

pub mod cluster;
pub mod invariants;
pub mod random;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod tcp;

use std::path::Path;

pub use cluster::{run_scenario, Cluster, SimCluster};
pub use invariants::{Invariant, Snapshot, Verdicts};
pub use report::{filter_messages, TraceFilter, TraceReport};
pub use scenario::{
    load_scenario, parse_scenario, Expectation, Scenario, ScenarioError, ScenarioEvent,
};
pub use tcp::{run_scenario_tcp, TcpCluster};

/// Loads and runs a scenario file. `seed` overrides the file's own seed.
pub fn run_scenario_file(
    path: &Path,
    seed: Option<u64>,
    tcp: bool,
) -> Result<TraceReport, ScenarioError> {
    let scenario = load_scenario(path)?;
    let seed = seed.or(scenario.seed).unwrap_or(0);
    Ok(if tcp {
        run_scenario_tcp(scenario, seed)
    } else {
        run_scenario(scenario, seed)
    })
}
