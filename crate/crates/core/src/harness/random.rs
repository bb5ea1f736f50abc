//! Seeded random scenarios for property tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_graph, AbstractConnection, AbstractGraph, ServiceKind, ServiceSpec};
use crate::service_runtime::Behavior;
use crate::transport::NodeAddr;

use super::scenario::{NodeSpec, Scenario, ScenarioEvent, TimedEvent};

#[derive(Debug, Clone, Copy)]
pub struct RandomShape {
    pub max_services: usize,
    pub max_nodes: usize,
    /// Upper bound on held sessions opened by the timeline.
    pub max_sessions: usize,
    /// Add instance kills, faults and agent failures.
    pub failures: bool,
}

impl Default for RandomShape {
    fn default() -> Self {
        RandomShape {
            max_services: 8,
            max_nodes: 4,
            max_sessions: 20,
            failures: false,
        }
    }
}

fn node(i: usize) -> NodeAddr {
    format!("10.0.0.{}", i + 2)
        .parse()
        .expect("literal address")
}

/// A random acyclic application graph: one gateway, then regular and BaaS
/// services with edges only toward later services.
pub fn random_graph(rng: &mut ChaCha8Rng, max_services: usize) -> AbstractGraph {
    let n = rng.gen_range(2..=max_services.max(2));
    let mut specs =
        vec![ServiceSpec::new("gw", ServiceKind::Gateway, &["in"], &[]).with_port("in", 80)];
    for i in 1..n {
        let kind = if i > 1 && rng.gen_bool(0.3) {
            ServiceKind::Baas
        } else {
            ServiceKind::Regular
        };
        let sockets: Vec<String> = (0..rng.gen_range(1..=2)).map(|k| format!("k{k}")).collect();
        let refs: Vec<&str> = sockets.iter().map(String::as_str).collect();
        specs.push(ServiceSpec::new(&format!("s{i}"), kind, &refs, &[]));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        if specs[i].kind == ServiceKind::Baas {
            continue;
        }
        for j in (i + 1)..n {
            let wanted = if j == i + 1 { 0.8 } else { 0.35 };
            if rng.gen_bool(wanted) {
                let plug = format!("p{j}");
                let socket = specs[j]
                    .sockets
                    .choose(rng)
                    .expect("one socket at least")
                    .clone();
                specs[i].plugs.push(plug.clone());
                edges.push(AbstractConnection::new(
                    &specs[i].name,
                    &plug,
                    &specs[j].name,
                    &socket,
                ));
            }
        }
    }
    build_graph(specs, edges).expect("generator emits valid graphs")
}

pub fn random_scenario(seed: u64, shape: RandomShape) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_graph(&mut rng, shape.max_services);
    let services: Vec<String> = graph.services().iter().map(|s| s.name.clone()).collect();
    let node_count = rng.gen_range(1..=shape.max_nodes.max(1));
    let mut repos: Vec<Vec<String>> = vec![Vec::new(); node_count];
    for s in &services {
        let home = rng.gen_range(0..node_count);
        repos[home].push(s.clone());
        for (i, r) in repos.iter_mut().enumerate() {
            if i != home && rng.gen_bool(0.3) {
                r.push(s.clone());
            }
        }
    }
    let mut scenario = Scenario::new(
        &format!("random-{seed}"),
        graph.clone(),
        "10.0.0.1".parse().expect("literal"),
    );
    scenario.seed = Some(seed);
    scenario.nodes = repos
        .into_iter()
        .enumerate()
        .map(|(i, mut repository)| {
            repository.sort();
            NodeSpec {
                addr: node(i),
                repository,
            }
        })
        .collect();
    let mut behaviors = BTreeMap::new();
    for s in graph.services() {
        let b = Behavior {
            calls: if s.plugs.is_empty() || rng.gen_bool(0.2) {
                None
            } else {
                let mut picked: Vec<String> = s
                    .plugs
                    .iter()
                    .filter(|_| rng.gen_bool(0.7))
                    .cloned()
                    .collect();
                if picked.is_empty() {
                    picked.push(s.plugs[0].clone());
                }
                Some(picked)
            },
            hold_ms: rng.gen_range(1..=20),
            ..Behavior::default()
        };
        behaviors.insert(s.name.clone(), b);
    }
    scenario.behaviors = behaviors;

    let with_plugs: Vec<(String, Vec<String>)> = graph
        .services()
        .iter()
        .filter(|s| !s.plugs.is_empty())
        .map(|s| (s.name.clone(), s.plugs.clone()))
        .collect();
    let non_gateways: Vec<String> = services.iter().filter(|s| *s != "gw").cloned().collect();
    let mut t = 100;
    let mut opened = 0;
    let mut held: Vec<(String, String)> = Vec::new();
    let steps = rng.gen_range(4..=30);
    for _ in 0..steps {
        t += rng.gen_range(5..=400);
        let roll = rng.gen_range(0..100);
        let event = if roll < 30 && opened < shape.max_sessions && !with_plugs.is_empty() {
            let (svc, plugs) = with_plugs.choose(&mut rng).expect("non-empty");
            let plug = plugs.choose(&mut rng).expect("non-empty").clone();
            opened += 1;
            held.push((svc.clone(), plug.clone()));
            ScenarioEvent::OpenSession {
                service: svc.clone(),
                plug,
            }
        } else if roll < 50 && !held.is_empty() {
            let (service, plug) = held.swap_remove(rng.gen_range(0..held.len()));
            ScenarioEvent::CloseSession { service, plug }
        } else if roll < 70 {
            ScenarioEvent::UserRequest { alias: "gw".into() }
        } else if roll < 80 && !non_gateways.is_empty() {
            ScenarioEvent::Scale {
                service: non_gateways.choose(&mut rng).expect("non-empty").clone(),
                node: None,
            }
        } else if shape.failures && roll < 88 && !non_gateways.is_empty() {
            ScenarioEvent::KillInstance {
                service: non_gateways.choose(&mut rng).expect("non-empty").clone(),
                id: rng.gen_range(1..=2),
            }
        } else if shape.failures && roll < 93 {
            ScenarioEvent::Fault {
                service: services.choose(&mut rng).expect("non-empty").clone(),
                id: 1,
                on: true,
            }
        } else if shape.failures && roll < 96 && node_count > 1 {
            ScenarioEvent::KillAgent {
                node: node(rng.gen_range(0..node_count)),
            }
        } else if roll < 98 && !non_gateways.is_empty() {
            ScenarioEvent::Shutdown {
                service: non_gateways.choose(&mut rng).expect("non-empty").clone(),
                id: 1,
                hard: rng.gen_bool(0.3),
            }
        } else {
            ScenarioEvent::AdvanceTime
        };
        scenario.timeline.push(TimedEvent { at: t, event });
    }
    scenario.end = Some(t + 3000);
    scenario
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_valid() {
        for seed in 0..50 {
            let a = random_scenario(seed, RandomShape::default());
            let b = random_scenario(seed, RandomShape::default());
            assert_eq!(a.timeline, b.timeline);
            assert!(a.graph.services().len() <= 8);
            a.validate().unwrap();
        }
    }
}
