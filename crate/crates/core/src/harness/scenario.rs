//! Line-based scenario files.
//!
//! ```text
//! graph fig1.graph
//! seed 7
//! manager 10.0.0.1
//! node 10.0.0.2 repo=A,B
//! behavior A calls=P hold=5
//! at 0 user_request A
//! at 50 expect sessions established=0 closed=1
//! end 1000
//! ```
//!
//! Setup directives come first; `at <ms> <event> <args...>` lines form the
//! timeline and must be in nondecreasing time order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::graph::{parse_graph_file, AbstractGraph, GraphError};
use crate::service_runtime::Behavior;
use crate::transport::NodeAddr;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("graph invalid: {0:?}")]
    Graph(Vec<GraphError>),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub addr: NodeAddr,
    pub repository: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Sessions {
        established: Option<usize>,
        closed: Option<usize>,
    },
    Instances {
        service: String,
        running: usize,
    },
    Node {
        addr: NodeAddr,
        isolated: bool,
    },
    Dns {
        alias: String,
        count: usize,
    },
    /// User requests completed by all instances of a gateway service.
    Served {
        service: String,
        count: u64,
    },
    Invariants,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioEvent {
    UserRequest {
        alias: String,
    },
    OpenSession {
        service: String,
        plug: String,
    },
    CloseSession {
        service: String,
        plug: String,
    },
    KillInstance {
        service: String,
        id: u64,
    },
    KillAgent {
        node: NodeAddr,
    },
    BreakLink {
        a: NodeAddr,
        b: NodeAddr,
    },
    HealLink {
        a: NodeAddr,
        b: NodeAddr,
    },
    Fault {
        service: String,
        id: u64,
        on: bool,
    },
    Shutdown {
        service: String,
        id: u64,
        hard: bool,
    },
    Scale {
        service: String,
        node: Option<NodeAddr>,
    },
    AdvanceTime,
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEvent {
    pub at: u64,
    pub event: ScenarioEvent,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub graph: AbstractGraph,
    pub manager: NodeAddr,
    pub nodes: Vec<NodeSpec>,
    pub behaviors: BTreeMap<String, Behavior>,
    pub seed: Option<u64>,
    pub end: Option<u64>,
    pub idle_timeout_ms: Option<u64>,
    pub timeline: Vec<TimedEvent>,
}

impl Scenario {
    pub fn new(name: &str, graph: AbstractGraph, manager: NodeAddr) -> Self {
        Scenario {
            name: name.to_owned(),
            graph,
            manager,
            nodes: Vec::new(),
            behaviors: BTreeMap::new(),
            seed: None,
            end: None,
            idle_timeout_ms: None,
            timeline: Vec::new(),
        }
    }

    /// Time the run stops: `end` if given, else one second past the last event.
    pub fn end_time(&self) -> u64 {
        self.end
            .unwrap_or_else(|| self.timeline.last().map_or(0, |e| e.at) + 1000)
    }

    pub fn behavior(&self, service: &str) -> Behavior {
        self.behaviors.get(service).cloned().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut last = 0;
        for e in &self.timeline {
            if e.at < last {
                return Err(ScenarioError::Invalid(format!(
                    "event at {} precedes {}",
                    e.at, last
                )));
            }
            last = e.at;
        }
        let known = |s: &str| self.graph.service(s).is_some();
        for n in &self.nodes {
            if let Some(s) = n.repository.iter().find(|s| !known(s)) {
                return Err(ScenarioError::Invalid(format!(
                    "node {} hosts unknown service {s}",
                    n.addr
                )));
            }
        }
        for e in &self.timeline {
            let svc = match &e.event {
                ScenarioEvent::UserRequest { alias } => Some(alias),
                ScenarioEvent::OpenSession { service, .. }
                | ScenarioEvent::CloseSession { service, .. }
                | ScenarioEvent::KillInstance { service, .. }
                | ScenarioEvent::Fault { service, .. }
                | ScenarioEvent::Shutdown { service, .. }
                | ScenarioEvent::Scale { service, .. }
                | ScenarioEvent::Expect(Expectation::Instances { service, .. })
                | ScenarioEvent::Expect(Expectation::Served { service, .. }) => Some(service),
                _ => None,
            };
            if let Some(s) = svc.filter(|s| !known(s)) {
                return Err(ScenarioError::Invalid(format!(
                    "event at {} names unknown service {s}",
                    e.at
                )));
            }
        }
        Ok(())
    }
}

fn parse_u64(line: usize, s: &str) -> Result<u64, ScenarioError> {
    s.parse().map_err(|_| ScenarioError::Syntax {
        line,
        reason: format!("`{s}` is not a number"),
    })
}

fn parse_node(line: usize, s: &str) -> Result<NodeAddr, ScenarioError> {
    s.parse().map_err(|_| ScenarioError::Syntax {
        line,
        reason: format!("`{s}` is not an address"),
    })
}

fn parse_count(line: usize, arg: &str, key: &str) -> Result<u64, ScenarioError> {
    let v = arg
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| ScenarioError::Syntax {
            line,
            reason: format!("expected {key}=N, got `{arg}`"),
        })?;
    parse_u64(line, v)
}

fn parse_expectation(line: usize, args: &[&str]) -> Result<Expectation, ScenarioError> {
    let bad = |reason: &str| ScenarioError::Syntax {
        line,
        reason: reason.to_owned(),
    };
    match args {
        ["invariants"] => Ok(Expectation::Invariants),
        ["sessions", rest @ ..] if !rest.is_empty() => {
            let (mut established, mut closed) = (None, None);
            for a in rest {
                if a.starts_with("established=") {
                    established = Some(parse_count(line, a, "established")? as usize);
                } else if a.starts_with("closed=") {
                    closed = Some(parse_count(line, a, "closed")? as usize);
                } else {
                    return Err(bad("expect sessions takes established=N and/or closed=N"));
                }
            }
            Ok(Expectation::Sessions {
                established,
                closed,
            })
        }
        ["instances", service, running] => Ok(Expectation::Instances {
            service: (*service).to_owned(),
            running: parse_count(line, running, "running")? as usize,
        }),
        ["node", addr, state @ ("isolated" | "up")] => Ok(Expectation::Node {
            addr: parse_node(line, addr)?,
            isolated: *state == "isolated",
        }),
        ["dns", alias, count] => Ok(Expectation::Dns {
            alias: (*alias).to_owned(),
            count: parse_count(line, count, "count")? as usize,
        }),
        ["served", service, count] => Ok(Expectation::Served {
            service: (*service).to_owned(),
            count: parse_count(line, count, "count")?,
        }),
        _ => Err(bad("unknown expectation")),
    }
}

fn parse_event(line: usize, words: &[&str]) -> Result<ScenarioEvent, ScenarioError> {
    let bad = || ScenarioError::Syntax {
        line,
        reason: format!("malformed event `{}`", words.join(" ")),
    };
    let s = |w: &&str| (*w).to_owned();
    Ok(match words {
        ["user_request", alias] => ScenarioEvent::UserRequest { alias: s(alias) },
        ["open_session", service, plug] => ScenarioEvent::OpenSession {
            service: s(service),
            plug: s(plug),
        },
        ["close_session", service, plug] => ScenarioEvent::CloseSession {
            service: s(service),
            plug: s(plug),
        },
        ["kill_instance", service, id] => ScenarioEvent::KillInstance {
            service: s(service),
            id: parse_u64(line, id)?,
        },
        ["kill_agent", node] => ScenarioEvent::KillAgent {
            node: parse_node(line, node)?,
        },
        ["break_link", a, b] => ScenarioEvent::BreakLink {
            a: parse_node(line, a)?,
            b: parse_node(line, b)?,
        },
        ["heal_link", a, b] => ScenarioEvent::HealLink {
            a: parse_node(line, a)?,
            b: parse_node(line, b)?,
        },
        ["fault", service, id, state @ ("on" | "off")] => ScenarioEvent::Fault {
            service: s(service),
            id: parse_u64(line, id)?,
            on: *state == "on",
        },
        ["shutdown", service, id] => ScenarioEvent::Shutdown {
            service: s(service),
            id: parse_u64(line, id)?,
            hard: false,
        },
        ["shutdown", service, id, "hard"] => ScenarioEvent::Shutdown {
            service: s(service),
            id: parse_u64(line, id)?,
            hard: true,
        },
        ["scale", service] => ScenarioEvent::Scale {
            service: s(service),
            node: None,
        },
        ["scale", service, node] => ScenarioEvent::Scale {
            service: s(service),
            node: Some(parse_node(line, node)?),
        },
        ["advance_time"] => ScenarioEvent::AdvanceTime,
        ["expect", rest @ ..] => ScenarioEvent::Expect(parse_expectation(line, rest)?),
        _ => return Err(bad()),
    })
}

/// Parses a scenario. `graph <path>` is resolved against `base_dir`.
pub fn parse_scenario(name: &str, text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
    let mut graph: Option<AbstractGraph> = None;
    let mut manager: Option<NodeAddr> = None;
    let mut nodes = Vec::new();
    let mut behaviors = BTreeMap::new();
    let (mut seed, mut end, mut idle) = (None, None, None);
    let mut timeline = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let words: Vec<&str> = content.split_whitespace().collect();
        let syntax = |reason: String| ScenarioError::Syntax { line, reason };
        match words.as_slice() {
            ["graph", path] => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full).map_err(|e| ScenarioError::Io {
                    path: full.display().to_string(),
                    reason: e.to_string(),
                })?;
                graph = Some(parse_graph_file(&text).map_err(ScenarioError::Graph)?);
            }
            ["manager", addr] => manager = Some(parse_node(line, addr)?),
            ["node", addr, rest @ ..] => {
                let mut repository = Vec::new();
                for r in rest {
                    let list = r
                        .strip_prefix("repo=")
                        .ok_or_else(|| syntax(format!("expected repo=..., got `{r}`")))?;
                    repository.extend(list.split(',').filter(|s| !s.is_empty()).map(str::to_owned));
                }
                nodes.push(NodeSpec {
                    addr: parse_node(line, addr)?,
                    repository,
                });
            }
            ["behavior", service, rest @ ..] => {
                let b: Behavior = rest.join(" ").parse().map_err(syntax)?;
                behaviors.insert((*service).to_owned(), b);
            }
            ["seed", n] => seed = Some(parse_u64(line, n)?),
            ["end", n] => end = Some(parse_u64(line, n)?),
            ["idle_timeout", n] => idle = Some(parse_u64(line, n)?),
            ["at", t, event @ ..] => {
                let at = parse_u64(line, t)?;
                timeline.push(TimedEvent {
                    at,
                    event: parse_event(line, event)?,
                });
            }
            _ => return Err(syntax(format!("unknown directive `{content}`"))),
        }
    }
    let scenario = Scenario {
        name: name.to_owned(),
        graph: graph.ok_or_else(|| ScenarioError::Invalid("missing `graph` directive".into()))?,
        manager: manager
            .ok_or_else(|| ScenarioError::Invalid("missing `manager` directive".into()))?,
        nodes,
        behaviors,
        seed,
        end,
        idle_timeout_ms: idle,
        timeline,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Loads a scenario file; its graph path is relative to the file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    parse_scenario(&name, &text, path.parent().unwrap_or(Path::new(".")))
}

impl fmt::Display for ScenarioEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioEvent::UserRequest { alias } => write!(f, "user_request {alias}"),
            ScenarioEvent::OpenSession { service, plug } => {
                write!(f, "open_session {service} {plug}")
            }
            ScenarioEvent::CloseSession { service, plug } => {
                write!(f, "close_session {service} {plug}")
            }
            ScenarioEvent::KillInstance { service, id } => {
                write!(f, "kill_instance {service} {id}")
            }
            ScenarioEvent::KillAgent { node } => write!(f, "kill_agent {node}"),
            ScenarioEvent::BreakLink { a, b } => write!(f, "break_link {a} {b}"),
            ScenarioEvent::HealLink { a, b } => write!(f, "heal_link {a} {b}"),
            ScenarioEvent::Fault { service, id, on } => {
                write!(f, "fault {service} {id} {}", if *on { "on" } else { "off" })
            }
            ScenarioEvent::Shutdown { service, id, hard } => {
                write!(
                    f,
                    "shutdown {service} {id}{}",
                    if *hard { " hard" } else { "" }
                )
            }
            ScenarioEvent::Scale { service, node } => match node {
                Some(n) => write!(f, "scale {service} {n}"),
                None => write!(f, "scale {service}"),
            },
            ScenarioEvent::AdvanceTime => write!(f, "advance_time"),
            ScenarioEvent::Expect(e) => write!(f, "expect {e}"),
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Sessions {
                established,
                closed,
            } => {
                f.write_str("sessions")?;
                if let Some(n) = established {
                    write!(f, " established={n}")?;
                }
                if let Some(n) = closed {
                    write!(f, " closed={n}")?;
                }
                Ok(())
            }
            Expectation::Instances { service, running } => {
                write!(f, "instances {service} running={running}")
            }
            Expectation::Node { addr, isolated } => {
                write!(
                    f,
                    "node {addr} {}",
                    if *isolated { "isolated" } else { "up" }
                )
            }
            Expectation::Dns { alias, count } => write!(f, "dns {alias} count={count}"),
            Expectation::Served { service, count } => write!(f, "served {service} count={count}"),
            Expectation::Invariants => f.write_str("invariants"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRAPH: &str = "service A kind=gateway sockets=S1 plugs=P ports=S1:80\nservice B kind=regular sockets=S plugs=\nedge A P -> B S\n";

    fn with_graph(body: &str) -> Result<Scenario, ScenarioError> {
        let dir =
            std::env::temp_dir().join(format!("ssmmp-scn-{}-{}", std::process::id(), body.len()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("g.graph"), GRAPH).unwrap();
        parse_scenario("t", &format!("graph g.graph\n{body}"), &dir)
    }

    #[test]
    fn parses_every_event_kind() {
        let s = with_graph(
            "manager 10.0.0.1\nnode 10.0.0.2 repo=A,B\nbehavior A calls=P hold=3\nseed 4\nend 900\n\
             at 0 user_request A\nat 1 open_session A P\nat 2 close_session A P\nat 3 kill_instance B 1\n\
             at 4 kill_agent 10.0.0.2\nat 5 break_link 10.0.0.1 10.0.0.2\nat 6 heal_link 10.0.0.1 10.0.0.2\n\
             at 7 fault B 1 on\nat 8 shutdown B 1 hard\nat 9 scale B 10.0.0.2\nat 10 advance_time\n\
             at 11 expect sessions established=1 closed=2\nat 12 expect instances B running=1\n\
             at 13 expect node 10.0.0.2 isolated\nat 14 expect dns A count=1\nat 15 expect invariants\n\
             at 16 expect served A count=2\n",
        )
        .unwrap();
        assert_eq!(s.timeline.len(), 17);
        assert_eq!(s.seed, Some(4));
        assert_eq!(s.end_time(), 900);
        assert_eq!(s.behavior("A").calls, Some(vec!["P".to_string()]));
        for e in &s.timeline {
            let reparsed = parse_event(
                0,
                &e.event.to_string().split_whitespace().collect::<Vec<_>>(),
            )
            .unwrap();
            assert_eq!(reparsed, e.event);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            with_graph("manager 10.0.0.1\nat 5 user_request A\nat 4 advance_time\n"),
            Err(ScenarioError::Invalid(_))
        ));
        assert!(matches!(
            with_graph("manager 10.0.0.1\nat 0 user_request Z\n"),
            Err(ScenarioError::Invalid(_))
        ));
        assert!(matches!(
            with_graph("manager 10.0.0.1\nat x user_request A\n"),
            Err(ScenarioError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            with_graph("manager 10.0.0.1\nat 0 dance\n"),
            Err(ScenarioError::Syntax { .. })
        ));
        assert!(matches!(
            with_graph("node 10.0.0.2 repo=A\n"),
            Err(ScenarioError::Invalid(_))
        ));
    }
}
