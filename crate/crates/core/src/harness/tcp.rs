//! Loopback TCP runs. Timeline times are wall-clock milliseconds.

use crate::transport::tcp::{TcpConfig, TcpNet};

use super::cluster::Cluster;
use super::report::TraceReport;
use super::scenario::Scenario;

pub type TcpCluster = Cluster<TcpNet>;

impl TcpCluster {
    pub fn new_tcp(scenario: Scenario, seed: u64) -> Self {
        Cluster::with_net(TcpNet::new(TcpConfig::default()), scenario, seed)
    }
}

/// Runs a scenario over loopback TCP. `seed` only labels the report; the
/// interleaving is whatever the OS produces.
pub fn run_scenario_tcp(scenario: Scenario, seed: u64) -> TraceReport {
    let mut c = TcpCluster::new_tcp(scenario, seed);
    c.run();
    c.report()
}
