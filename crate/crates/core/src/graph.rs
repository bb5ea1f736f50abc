//! Abstract architecture of a cloud-native application: services with their
//! sockets and plugs, and the abstract connections `(A, (P, S), B)` between
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::wire::is_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServiceKind {
    Gateway,
    Regular,
    Baas,
}

impl ServiceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::Gateway => "gateway",
            ServiceKind::Regular => "regular",
            ServiceKind::Baas => "baas",
        }
    }
}

impl FromStr for ServiceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gateway" => Ok(ServiceKind::Gateway),
            "regular" => Ok(ServiceKind::Regular),
            "baas" => Ok(ServiceKind::Baas),
            other => Err(format!("unknown service kind `{other}`")),
        }
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A vertex: sockets form the IN collection, plugs the OUT collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSpec {
    pub name: String,
    pub kind: ServiceKind,
    pub sockets: Vec<String>,
    pub plugs: Vec<String>,
    /// Fixed, well-known socket ports. Gateways only.
    pub fixed_ports: BTreeMap<String, u16>,
}

impl ServiceSpec {
    pub fn new(name: &str, kind: ServiceKind, sockets: &[&str], plugs: &[&str]) -> Self {
        ServiceSpec {
            name: name.to_owned(),
            kind,
            sockets: sockets.iter().map(|s| (*s).to_owned()).collect(),
            plugs: plugs.iter().map(|s| (*s).to_owned()).collect(),
            fixed_ports: BTreeMap::new(),
        }
    }

    pub fn with_port(mut self, socket: &str, port: u16) -> Self {
        self.fixed_ports.insert(socket.to_owned(), port);
        self
    }

    pub fn is_gateway(&self) -> bool {
        self.kind == ServiceKind::Gateway
    }
}

/// Edge `(source, (plug, socket), dest)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AbstractConnection {
    pub source: String,
    pub plug: String,
    pub dest: String,
    pub socket: String,
}

impl AbstractConnection {
    pub fn new(source: &str, plug: &str, dest: &str, socket: &str) -> Self {
        AbstractConnection {
            source: source.to_owned(),
            plug: plug.to_owned(),
            dest: dest.to_owned(),
            socket: socket.to_owned(),
        }
    }
}

impl fmt::Display for AbstractConnection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, ({}, {}), {})",
            self.source, self.plug, self.socket, self.dest
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("dangling endpoint: {0}")]
    DanglingEndpoint(String),
    #[error("kind violation: {0}")]
    KindViolation(String),
    #[error("plug {plug} of {service} used by more than one edge")]
    DuplicatePlugUse { service: String, plug: String },
    #[error("duplicate service `{0}`")]
    DuplicateService(String),
    #[error("duplicate socket or plug name `{name}` in {service}")]
    DuplicateName { service: String, name: String },
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("graph has no services")]
    EmptyGraph,
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

/// Validated, immutable abstract graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractGraph {
    vertices: Vec<ServiceSpec>,
    edges: Vec<AbstractConnection>,
}

fn kind_errors(spec: &ServiceSpec, errors: &mut Vec<GraphError>) {
    let mut seen = BTreeSet::new();
    for n in spec.sockets.iter().chain(&spec.plugs) {
        if !is_token(n) {
            errors.push(GraphError::DanglingEndpoint(format!(
                "`{n}` in {} is not a token",
                spec.name
            )));
        }
        if !seen.insert(n) {
            errors.push(GraphError::DuplicateName {
                service: spec.name.clone(),
                name: n.clone(),
            });
        }
    }
    match spec.kind {
        ServiceKind::Baas if !spec.plugs.is_empty() => errors.push(GraphError::KindViolation(
            format!("baas service {} declares plugs", spec.name),
        )),
        ServiceKind::Gateway => {
            for s in &spec.sockets {
                if !spec.fixed_ports.contains_key(s) {
                    errors.push(GraphError::KindViolation(format!(
                        "gateway {} socket {s} has no fixed port",
                        spec.name
                    )));
                }
            }
        }
        _ => {}
    }
    if spec.kind != ServiceKind::Gateway && !spec.fixed_ports.is_empty() {
        errors.push(GraphError::KindViolation(format!(
            "{} is not a gateway but declares fixed ports",
            spec.name
        )));
    }
    for (s, port) in &spec.fixed_ports {
        if !spec.sockets.contains(s) {
            errors.push(GraphError::DanglingEndpoint(format!(
                "fixed port for unknown socket {s} of {}",
                spec.name
            )));
        }
        if *port == 0 {
            errors.push(GraphError::KindViolation(format!(
                "port 0 for {s} of {}",
                spec.name
            )));
        }
    }
}

/// Depth-first search for a cycle; returns the cycle's vertex path if any.
fn find_cycle(names: &[&str], edges: &[(usize, usize)]) -> Option<Vec<String>> {
    let n = names.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        v: usize,
        adj: &[Vec<usize>],
        color: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        color[v] = 1;
        stack.push(v);
        for &w in &adj[v] {
            if color[w] == 1 {
                let start = stack.iter().position(|&x| x == w).unwrap_or(0);
                let mut cycle = stack[start..].to_vec();
                cycle.push(w);
                return Some(cycle);
            }
            if color[w] == 0 {
                if let Some(c) = visit(w, adj, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[v] = 2;
        None
    }

    for v in 0..n {
        if color[v] == 0 {
            if let Some(c) = visit(v, &adj, &mut color, &mut stack) {
                return Some(c.into_iter().map(|i| names[i].to_owned()).collect());
            }
        }
    }
    None
}

/// Validates services and connections into a graph, reporting every violated
/// rule.
pub fn build_graph(
    specs: Vec<ServiceSpec>,
    conns: Vec<AbstractConnection>,
) -> Result<AbstractGraph, Vec<GraphError>> {
    let mut errors = Vec::new();
    if specs.is_empty() {
        return Err(vec![GraphError::EmptyGraph]);
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        if !is_token(&s.name) {
            errors.push(GraphError::DanglingEndpoint(format!(
                "service name `{}` is not a token",
                s.name
            )));
        }
        if index.insert(s.name.as_str(), i).is_some() {
            errors.push(GraphError::DuplicateService(s.name.clone()));
        }
        kind_errors(s, &mut errors);
    }

    let mut used_plugs: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut resolved = Vec::new();
    let mut in_degree = vec![0usize; specs.len()];
    let mut out_degree = vec![0usize; specs.len()];
    for e in &conns {
        let src = index.get(e.source.as_str()).copied();
        let dst = index.get(e.dest.as_str()).copied();
        match src {
            None => errors.push(GraphError::DanglingEndpoint(format!(
                "{e}: unknown source {}",
                e.source
            ))),
            Some(i) if !specs[i].plugs.contains(&e.plug) => errors.push(
                GraphError::DanglingEndpoint(format!("{e}: {} has no plug {}", e.source, e.plug)),
            ),
            Some(_) => {}
        }
        match dst {
            None => errors.push(GraphError::DanglingEndpoint(format!(
                "{e}: unknown dest {}",
                e.dest
            ))),
            Some(j) if !specs[j].sockets.contains(&e.socket) => errors.push(
                GraphError::DanglingEndpoint(format!("{e}: {} has no socket {}", e.dest, e.socket)),
            ),
            Some(_) => {}
        }
        if !used_plugs.insert((e.source.as_str(), e.plug.as_str())) {
            errors.push(GraphError::DuplicatePlugUse {
                service: e.source.clone(),
                plug: e.plug.clone(),
            });
        }
        if let (Some(i), Some(j)) = (src, dst) {
            out_degree[i] += 1;
            in_degree[j] += 1;
            resolved.push((i, j));
        }
    }

    for (i, s) in specs.iter().enumerate() {
        if s.kind == ServiceKind::Gateway && in_degree[i] > 0 {
            errors.push(GraphError::KindViolation(format!(
                "gateway {} has incoming edges",
                s.name
            )));
        }
        if s.kind == ServiceKind::Baas && out_degree[i] > 0 {
            errors.push(GraphError::KindViolation(format!(
                "baas {} has outgoing edges",
                s.name
            )));
        }
    }

    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    if let Some(cycle) = find_cycle(&names, &resolved) {
        errors.push(GraphError::CycleDetected(cycle));
    }

    if errors.is_empty() {
        Ok(AbstractGraph {
            vertices: specs,
            edges: conns,
        })
    } else {
        Err(errors)
    }
}

impl AbstractGraph {
    pub fn services(&self) -> &[ServiceSpec] {
        &self.vertices
    }

    pub fn edges(&self) -> &[AbstractConnection] {
        &self.edges
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.vertices.iter().find(|s| s.name == name)
    }

    pub fn gateways(&self) -> impl Iterator<Item = &ServiceSpec> {
        self.vertices.iter().filter(|s| s.is_gateway())
    }

    /// Edges leaving `service`, in declaration order.
    pub fn outgoing_connections(
        &self,
        service: &str,
    ) -> Result<Vec<&AbstractConnection>, GraphError> {
        if self.service(service).is_none() {
            return Err(GraphError::UnknownService(service.to_owned()));
        }
        Ok(self.edges.iter().filter(|e| e.source == service).collect())
    }

    pub fn find_edge(
        &self,
        source: &str,
        plug: &str,
        dest: &str,
        socket: &str,
    ) -> Option<&AbstractConnection> {
        self.edges
            .iter()
            .find(|e| e.source == source && e.plug == plug && e.dest == dest && e.socket == socket)
    }

    /// Topological order with ties broken lexicographically by name.
    pub fn topological_order(&self) -> Vec<String> {
        let mut indeg: BTreeMap<&str, usize> =
            self.vertices.iter().map(|s| (s.name.as_str(), 0)).collect();
        for e in &self.edges {
            *indeg.get_mut(e.dest.as_str()).expect("validated") += 1;
        }
        let mut ready: BTreeSet<&str> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| *n)
            .collect();
        let mut order = Vec::with_capacity(self.vertices.len());
        while let Some(v) = ready.pop_first() {
            order.push(v.to_owned());
            for e in self.edges.iter().filter(|e| e.source == v) {
                let d = indeg.get_mut(e.dest.as_str()).expect("validated");
                *d -= 1;
                if *d == 0 {
                    ready.insert(e.dest.as_str());
                }
            }
        }
        order
    }
}

fn syntax(line: usize, reason: impl Into<String>) -> GraphError {
    GraphError::Syntax {
        line,
        reason: reason.into(),
    }
}

fn split_csv(value: &str) -> Vec<String> {
    if value.is_empty() {
        Vec::new()
    } else {
        value.split(',').map(str::to_owned).collect()
    }
}

fn parse_service_line(line: usize, words: &[&str]) -> Result<ServiceSpec, GraphError> {
    let name = words
        .get(1)
        .ok_or_else(|| syntax(line, "service needs a name"))?;
    let mut kind = None;
    let mut sockets = None;
    let mut plugs = None;
    let mut ports = BTreeMap::new();
    for w in &words[2..] {
        let (key, value) = w
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected key=value, got `{w}`")))?;
        match key {
            "kind" => kind = Some(value.parse::<ServiceKind>().map_err(|e| syntax(line, e))?),
            "sockets" => sockets = Some(split_csv(value)),
            "plugs" => plugs = Some(split_csv(value)),
            "ports" => {
                for item in split_csv(value) {
                    let (s, p) = item
                        .split_once(':')
                        .ok_or_else(|| syntax(line, format!("bad port entry `{item}`")))?;
                    let port: u16 = p
                        .parse()
                        .map_err(|_| syntax(line, format!("bad port `{p}`")))?;
                    ports.insert(s.to_owned(), port);
                }
            }
            other => return Err(syntax(line, format!("unknown key `{other}`"))),
        }
    }
    Ok(ServiceSpec {
        name: (*name).to_owned(),
        kind: kind.ok_or_else(|| syntax(line, "missing kind="))?,
        sockets: sockets.ok_or_else(|| syntax(line, "missing sockets="))?,
        plugs: plugs.ok_or_else(|| syntax(line, "missing plugs="))?,
        fixed_ports: ports,
    })
}

/// Parses the line-based graph file format and validates the result.
pub fn parse_graph_file(text: &str) -> Result<AbstractGraph, Vec<GraphError>> {
    let mut specs = Vec::new();
    let mut conns = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        match words[0] {
            "service" => match parse_service_line(line, &words) {
                Ok(s) => specs.push(s),
                Err(e) => errors.push(e),
            },
            "edge" => match words.as_slice() {
                [_, src, plug, "->", dst, socket] => {
                    conns.push(AbstractConnection::new(src, plug, dst, socket))
                }
                _ => errors.push(syntax(
                    line,
                    "expected `edge <src> <plug> -> <dst> <socket>`",
                )),
            },
            other => errors.push(syntax(line, format!("unknown directive `{other}`"))),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    build_graph(specs, conns)
}

pub fn serialize_graph_file(g: &AbstractGraph) -> String {
    let mut out = String::new();
    for s in &g.vertices {
        out.push_str(&format!(
            "service {} kind={} sockets={} plugs={}",
            s.name,
            s.kind,
            s.sockets.join(","),
            s.plugs.join(",")
        ));
        if !s.fixed_ports.is_empty() {
            let ports: Vec<String> = s
                .fixed_ports
                .iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect();
            out.push_str(&format!(" ports={}", ports.join(",")));
        }
        out.push('\n');
    }
    for e in &g.edges {
        out.push_str(&format!(
            "edge {} {} -> {} {}\n",
            e.source, e.plug, e.dest, e.socket
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn fig1() -> AbstractGraph {
        use ServiceKind::*;
        let specs = vec![
            ServiceSpec::new("A", Gateway, &["S1"], &["P", "P2", "P3"]).with_port("S1", 80),
            ServiceSpec::new("B", Regular, &["S"], &["P4", "P5"]),
            ServiceSpec::new("service-1", Regular, &["S2"], &["P6", "P7"]),
            ServiceSpec::new("service-2", Regular, &["S3"], &[]),
            ServiceSpec::new("service-3", Regular, &["S7"], &[]),
            ServiceSpec::new("service-4", Regular, &["S4", "S5", "S6"], &[]),
            ServiceSpec::new("BaaS-1", Baas, &["SB1"], &[]),
            ServiceSpec::new("BaaS-2", Baas, &["SB2"], &[]),
        ];
        let conns = vec![
            AbstractConnection::new("A", "P", "B", "S"),
            AbstractConnection::new("A", "P2", "service-1", "S2"),
            AbstractConnection::new("A", "P3", "service-2", "S3"),
            AbstractConnection::new("B", "P4", "service-4", "S4"),
            AbstractConnection::new("B", "P5", "service-4", "S5"),
            AbstractConnection::new("service-1", "P6", "service-4", "S6"),
            AbstractConnection::new("service-1", "P7", "service-3", "S7"),
        ];
        build_graph(specs, conns).unwrap()
    }

    #[test]
    fn fig1_is_valid() {
        let g = fig1();
        assert_eq!(g.services().len(), 8);
        assert_eq!(g.edges().len(), 7);
    }

    #[test]
    fn minimal_dag() {
        let g = build_graph(
            vec![
                ServiceSpec::new("gw", ServiceKind::Gateway, &["in"], &["out"]).with_port("in", 80),
                ServiceSpec::new("db", ServiceKind::Baas, &["q"], &[]),
            ],
            vec![AbstractConnection::new("gw", "out", "db", "q")],
        );
        assert!(g.is_ok());
    }

    #[test]
    fn back_edge_creates_cycle() {
        let g = fig1();
        let mut specs = g.services().to_vec();
        let mut conns = g.edges().to_vec();
        specs
            .iter_mut()
            .find(|s| s.name == "service-4")
            .unwrap()
            .plugs
            .push("Px".into());
        specs
            .iter_mut()
            .find(|s| s.name == "B")
            .unwrap()
            .sockets
            .push("Sx".into());
        conns.push(AbstractConnection::new("service-4", "Px", "B", "Sx"));
        let errors = build_graph(specs, conns).unwrap_err();
        assert!(
            errors.iter().any(|e| matches!(e, GraphError::CycleDetected(c) if c.contains(&"B".to_owned()) && c.contains(&"service-4".to_owned()))),
            "{errors:?}"
        );
    }

    #[test]
    fn reports_every_violation() {
        let errors = build_graph(
            vec![
                ServiceSpec::new("gw", ServiceKind::Gateway, &["in"], &["out", "out"]),
                ServiceSpec::new("db", ServiceKind::Baas, &["q"], &["p"]),
            ],
            vec![
                AbstractConnection::new("gw", "out", "db", "q"),
                AbstractConnection::new("gw", "out", "db", "q"),
                AbstractConnection::new("db", "p", "gw", "in"),
                AbstractConnection::new("ghost", "p", "db", "zz"),
            ],
        )
        .unwrap_err();
        let has = |f: fn(&GraphError) -> bool| errors.iter().any(f);
        assert!(has(|e| matches!(e, GraphError::DuplicateName { .. })));
        assert!(has(|e| matches!(e, GraphError::KindViolation(_))));
        assert!(has(|e| matches!(e, GraphError::DuplicatePlugUse { .. })));
        assert!(has(|e| matches!(e, GraphError::DanglingEndpoint(_))));
        assert!(has(|e| matches!(e, GraphError::CycleDetected(_))));
    }

    #[test]
    fn topological_order_fig1() {
        let order = fig1().topological_order();
        let pos = |n: &str| order.iter().position(|x| x == n).unwrap();
        assert_eq!(order.len(), 8);
        assert!(pos("A") < pos("B"));
        assert!(pos("B") < pos("service-4"));
        assert!(pos("service-1") < pos("service-3"));
        // Frozen from the lexicographic tie-break rule; every ordering
        // constraint is re-checked by the brute-force test below.
        assert_eq!(
            order,
            [
                "A",
                "B",
                "BaaS-1",
                "BaaS-2",
                "service-1",
                "service-2",
                "service-3",
                "service-4"
            ]
        );
    }

    #[test]
    fn topological_order_brute_force_fig1() {
        // Enumerate all 8! orderings; the implementation's output must be
        // exactly the lexicographically smallest valid one.
        let g = fig1();
        let mut names: Vec<String> = g.services().iter().map(|s| s.name.clone()).collect();
        names.sort();
        let valid = |perm: &[String]| {
            g.edges().iter().all(|e| {
                perm.iter().position(|x| *x == e.source) < perm.iter().position(|x| *x == e.dest)
            })
        };
        let mut best: Option<Vec<String>> = None;
        permute(&mut names, 0, &mut |p| {
            if valid(p) && best.as_ref().is_none_or(|b| p < b.as_slice()) {
                best = Some(p.to_vec());
            }
        });
        assert_eq!(g.topological_order(), best.unwrap());
    }

    fn permute(items: &mut Vec<String>, k: usize, f: &mut dyn FnMut(&[String])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn topological_order_small_cases() {
        let single = build_graph(
            vec![ServiceSpec::new("x", ServiceKind::Regular, &["s"], &[])],
            vec![],
        )
        .unwrap();
        assert_eq!(single.topological_order(), vec!["x"]);

        use ServiceKind::*;
        let chains = build_graph(
            vec![
                ServiceSpec::new("a1", Regular, &[], &["p"]),
                ServiceSpec::new("a2", Regular, &["s"], &[]),
                ServiceSpec::new("b1", Regular, &[], &["p"]),
                ServiceSpec::new("b2", Regular, &["s"], &[]),
            ],
            vec![
                AbstractConnection::new("b1", "p", "b2", "s"),
                AbstractConnection::new("a1", "p", "a2", "s"),
            ],
        )
        .unwrap();
        assert_eq!(chains.topological_order(), vec!["a1", "a2", "b1", "b2"]);
    }

    #[test]
    fn outgoing_connections_cases() {
        let g = fig1();
        let a: Vec<_> = g
            .outgoing_connections("A")
            .unwrap()
            .iter()
            .map(|e| e.plug.clone())
            .collect();
        assert_eq!(a, vec!["P", "P2", "P3"]);
        assert!(g.outgoing_connections("BaaS-1").unwrap().is_empty());
        let b = g.outgoing_connections("B").unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|e| e.dest == "service-4"));
        assert_ne!(b[0].plug, b[1].plug);
        assert_eq!(
            g.outgoing_connections("nope"),
            Err(GraphError::UnknownService("nope".into()))
        );
    }

    #[test]
    fn graph_file_roundtrip_fig1() {
        let g = fig1();
        let text = serialize_graph_file(&g);
        assert_eq!(parse_graph_file(&text).unwrap(), g);
    }

    #[test]
    fn graph_file_errors() {
        assert_eq!(
            parse_graph_file("# nothing\n\n"),
            Err(vec![GraphError::EmptyGraph])
        );
        let errs =
            parse_graph_file("service a kind=regular sockets=s plugs=\nbogus line\n").unwrap_err();
        assert_eq!(
            errs,
            vec![GraphError::Syntax {
                line: 2,
                reason: "unknown directive `bogus`".into()
            }]
        );
        let errs = parse_graph_file("service a kind=weird sockets= plugs=\n").unwrap_err();
        assert!(matches!(errs[0], GraphError::Syntax { line: 1, .. }));
        let errs = parse_graph_file("service a kind=regular sockets=s plugs=p\nedge a p b s\n")
            .unwrap_err();
        assert!(matches!(errs[0], GraphError::Syntax { line: 2, .. }));
    }

    prop_compose! {
        fn random_dag()(n in 1usize..7, raw in prop::collection::vec((0usize..7, 0usize..7), 0..10), kinds in prop::collection::vec(0u8..3, 7))
            -> AbstractGraph {
            // Edges only go from lower to higher index, so the result is acyclic.
            let edges: Vec<(usize, usize)> = raw.into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a < b)
                .collect();
            let mut specs: Vec<ServiceSpec> = (0..n).map(|i| {
                let has_in = edges.iter().any(|e| e.1 == i);
                let has_out = edges.iter().any(|e| e.0 == i);
                let kind = match kinds[i] {
                    0 if !has_in => ServiceKind::Gateway,
                    2 if !has_out => ServiceKind::Baas,
                    _ => ServiceKind::Regular,
                };
                ServiceSpec { name: format!("svc{i}"), kind, sockets: vec![format!("s{i}")], plugs: vec![], fixed_ports: BTreeMap::new() }
            }).collect();
            let mut conns = Vec::new();
            for (k, (a, b)) in edges.iter().enumerate() {
                let plug = format!("p{k}");
                specs[*a].plugs.push(plug.clone());
                conns.push(AbstractConnection::new(&format!("svc{a}"), &plug, &format!("svc{b}"), &format!("s{b}")));
            }
            for s in specs.iter_mut().filter(|s| s.is_gateway()) {
                let socket = s.sockets[0].clone();
                s.fixed_ports.insert(socket, 8080);
            }
            build_graph(specs, conns).expect("generator yields valid graphs")
        }
    }

    proptest! {
        #[test]
        fn graph_file_roundtrip(g in random_dag()) {
            prop_assert_eq!(parse_graph_file(&serialize_graph_file(&g)).unwrap(), g);
        }

        #[test]
        fn topological_order_respects_edges(g in random_dag()) {
            let order = g.topological_order();
            prop_assert_eq!(order.len(), g.services().len());
            for e in g.edges() {
                let a = order.iter().position(|x| *x == e.source).unwrap();
                let b = order.iter().position(|x| *x == e.dest).unwrap();
                prop_assert!(a < b);
            }
        }
    }
}
