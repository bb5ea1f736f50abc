use std::fmt;

use crate::transport::NodeAddr;

/// A running instance eligible to accept a new session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub node: NodeAddr,
    pub instance_id: u64,
    pub open_sessions: usize,
}

/// Chooses the dest instance of a new session.
pub trait SelectionPolicy: fmt::Debug + Send {
    /// Index into `candidates`, which is never empty.
    fn select(&mut self, candidates: &[Candidate]) -> usize;
}

/// Fewest open sessions; ties go to the lowest `(node, instance_id)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LeastSessions;

impl SelectionPolicy for LeastSessions {
    fn select(&mut self, candidates: &[Candidate]) -> usize {
        candidates
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| (c.open_sessions, c.node, c.instance_id))
            .map(|(i, _)| i)
            .expect("candidates are non-empty")
    }
}

/// Decides whether an overload report warrants one more instance.
pub trait ScalingPolicy: fmt::Debug + Send {
    fn on_overload(&mut self, service: &str, running: usize) -> bool;
}

/// Instances are started only when a session needs one.
#[derive(Debug, Clone, Copy, Default)]
pub struct OnDemand;

impl ScalingPolicy for OnDemand {
    fn on_overload(&mut self, _service: &str, _running: usize) -> bool {
        false
    }
}

/// Adds an instance on overload, up to `max` per service.
#[derive(Debug, Clone, Copy)]
pub struct ScaleOut {
    pub max: usize,
}

impl ScalingPolicy for ScaleOut {
    fn on_overload(&mut self, _service: &str, running: usize) -> bool {
        running < self.max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(node: &str, id: u64, open: usize) -> Candidate {
        Candidate {
            node: node.parse().unwrap(),
            instance_id: id,
            open_sessions: open,
        }
    }

    #[test]
    fn least_sessions_with_tie_break() {
        let mut p = LeastSessions;
        assert_eq!(
            p.select(&[cand("10.0.0.1", 1, 3), cand("10.0.0.2", 2, 1)]),
            1
        );
        assert_eq!(
            p.select(&[cand("10.0.0.2", 1, 1), cand("10.0.0.1", 2, 1)]),
            1
        );
        assert_eq!(
            p.select(&[cand("10.0.0.1", 5, 0), cand("10.0.0.1", 4, 0)]),
            1
        );
    }
}
