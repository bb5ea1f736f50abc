//! Line-based trace reports: rendered deterministically, parsed back for
//! `ssmmp trace`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::wire::{parse_message, FieldName as F, Message, MessageType as T};

pub const REPORT_HEADER: &str = "ssmmp-report 1";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("report line {line}: {reason}")]
pub struct ReportError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLine {
    pub seq: u64,
    pub time: u64,
    pub kind: String,
    pub src: String,
    pub dst: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageLine {
    pub seq: u64,
    pub time: u64,
    pub from: String,
    pub to: String,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLine {
    pub service: String,
    pub instance_id: u64,
    pub node: String,
    pub state: String,
    pub sockets: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionLine {
    pub id: u64,
    pub message_id: u64,
    pub state: String,
    pub reason: String,
    /// The eleven parameters in record order; `-` when unknown.
    pub params: Vec<(String, String)>,
}

impl SessionLine {
    pub fn param(&self, name: F) -> Option<&str> {
        self.params
            .iter()
            .find(|(n, _)| n == name.as_str())
            .map(|(_, v)| v.as_str())
            .filter(|v| *v != "-")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictLine {
    pub name: String,
    pub passed: bool,
    pub checks: u64,
    pub failures: u64,
    pub first: Option<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectLine {
    pub time: u64,
    pub passed: bool,
    pub text: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEntry {
    Event(EventLine),
    Message(MessageLine),
}

impl TraceEntry {
    fn seq(&self) -> u64 {
        match self {
            TraceEntry::Event(e) => e.seq,
            TraceEntry::Message(m) => m.seq,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceReport {
    pub scenario: String,
    pub seed: u64,
    pub transport: String,
    pub end_time: u64,
    pub trace: Vec<TraceEntry>,
    pub agents: Vec<String>,
    pub instances: Vec<InstanceLine>,
    pub sessions: Vec<SessionLine>,
    pub dns: Vec<String>,
    pub runtimes: Vec<String>,
    pub notes: Vec<String>,
    pub sweeps: u64,
    pub verdicts: Vec<VerdictLine>,
    pub expects: Vec<ExpectLine>,
}

impl TraceReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed) && self.expects.iter().all(|e| e.passed)
    }

    pub fn messages(&self) -> impl Iterator<Item = &MessageLine> {
        self.trace.iter().filter_map(|e| match e {
            TraceEntry::Message(m) => Some(m),
            TraceEntry::Event(_) => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &EventLine> {
        self.trace.iter().filter_map(|e| match e {
            TraceEntry::Event(ev) => Some(ev),
            TraceEntry::Message(_) => None,
        })
    }

    /// Merges events and messages by step, events first within a step.
    pub fn sort_trace(&mut self) {
        self.trace
            .sort_by_key(|e| (e.seq(), matches!(e, TraceEntry::Message(_))));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "{REPORT_HEADER}");
        let _ = writeln!(w, "scenario {}", self.scenario);
        let _ = writeln!(w, "seed {}", self.seed);
        let _ = writeln!(w, "transport {}", self.transport);
        let _ = writeln!(w, "end_time {}", self.end_time);
        let _ = writeln!(w, "[trace]");
        for e in &self.trace {
            match e {
                TraceEntry::Event(e) => {
                    let _ = writeln!(
                        w,
                        "event {} {} {} {} {}",
                        e.seq, e.time, e.kind, e.src, e.dst
                    );
                }
                TraceEntry::Message(m) => {
                    let _ = writeln!(
                        w,
                        "msg {} {} {} -> {} | {}",
                        m.seq,
                        m.time,
                        m.from,
                        m.to,
                        m.message.one_line()
                    );
                }
            }
        }
        let _ = writeln!(w, "[manager]");
        for a in &self.agents {
            let _ = writeln!(w, "agent {a}");
        }
        for i in &self.instances {
            let _ = writeln!(
                w,
                "instance {} {} {} {} {}",
                i.service, i.instance_id, i.node, i.state, i.sockets
            );
        }
        for s in &self.sessions {
            let params: Vec<String> = s.params.iter().map(|(n, v)| format!("{n}={v}")).collect();
            let _ = writeln!(
                w,
                "session {} {} {} {} {}",
                s.id,
                s.message_id,
                s.state,
                s.reason,
                params.join(" ")
            );
        }
        for d in &self.dns {
            let _ = writeln!(w, "dns {d}");
        }
        let _ = writeln!(w, "[runtimes]");
        for r in &self.runtimes {
            let _ = writeln!(w, "runtime {r}");
        }
        let _ = writeln!(w, "[notes]");
        for n in &self.notes {
            let _ = writeln!(w, "note {n}");
        }
        let _ = writeln!(w, "[verdicts]");
        let _ = writeln!(w, "sweeps {}", self.sweeps);
        for v in &self.verdicts {
            let _ = write!(
                w,
                "verdict {} {} checks={} failures={}",
                v.name,
                if v.passed { "pass" } else { "fail" },
                v.checks,
                v.failures
            );
            if let Some((t, d)) = &v.first {
                let _ = write!(w, " first={t} {d}");
            }
            let _ = writeln!(w);
        }
        let _ = writeln!(w, "[expects]");
        for e in &self.expects {
            let _ = write!(
                w,
                "expect {} {} {}",
                e.time,
                if e.passed { "pass" } else { "fail" },
                e.text
            );
            if !e.detail.is_empty() {
                let _ = write!(w, " :: {}", e.detail);
            }
            let _ = writeln!(w);
        }
        let _ = writeln!(w, "result {}", if self.passed() { "pass" } else { "fail" });
        out
    }

    pub fn parse(text: &str) -> Result<TraceReport, ReportError> {
        let mut r = TraceReport::default();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == REPORT_HEADER => {}
            _ => {
                return Err(ReportError {
                    line: 1,
                    reason: "not a trace report".into(),
                })
            }
        }
        for (i, line) in lines {
            let n = i + 1;
            let err = |reason: &str| ReportError {
                line: n,
                reason: reason.to_owned(),
            };
            if line.starts_with('[') || line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(&format!("bad number `{s}`")))
            };
            match head {
                "scenario" => r.scenario = rest.to_owned(),
                "seed" => r.seed = num(rest)?,
                "transport" => r.transport = rest.to_owned(),
                "end_time" => r.end_time = num(rest)?,
                "event" => {
                    let w: Vec<&str> = rest.split(' ').collect();
                    let [seq, time, kind, src, dst] = w.as_slice() else {
                        return Err(err("event needs five fields"));
                    };
                    r.trace.push(TraceEntry::Event(EventLine {
                        seq: num(seq)?,
                        time: num(time)?,
                        kind: (*kind).to_owned(),
                        src: (*src).to_owned(),
                        dst: (*dst).to_owned(),
                    }));
                }
                "msg" => {
                    let (meta, body) = rest
                        .split_once(" | ")
                        .ok_or_else(|| err("msg needs a body"))?;
                    let w: Vec<&str> = meta.split(' ').collect();
                    let [seq, time, from, "->", to] = w.as_slice() else {
                        return Err(err("msg needs `seq time from -> to`"));
                    };
                    let mut text: String = body.split(" | ").map(|p| format!("{p}\n")).collect();
                    text.push('\n');
                    let message =
                        parse_message(text.as_bytes()).map_err(|e| err(&e.to_string()))?;
                    r.trace.push(TraceEntry::Message(MessageLine {
                        seq: num(seq)?,
                        time: num(time)?,
                        from: (*from).to_owned(),
                        to: (*to).to_owned(),
                        message,
                    }));
                }
                "agent" => r.agents.push(rest.to_owned()),
                "instance" => {
                    let w: Vec<&str> = rest.split(' ').collect();
                    let [service, id, node, state, sockets] = w.as_slice() else {
                        return Err(err("instance needs five fields"));
                    };
                    r.instances.push(InstanceLine {
                        service: (*service).to_owned(),
                        instance_id: num(id)?,
                        node: (*node).to_owned(),
                        state: (*state).to_owned(),
                        sockets: (*sockets).to_owned(),
                    });
                }
                "session" => {
                    let w: Vec<&str> = rest.split(' ').collect();
                    if w.len() < 4 {
                        return Err(err("session needs id, message id, state and reason"));
                    }
                    let params = w[4..]
                        .iter()
                        .map(|p| {
                            p.split_once('=')
                                .map(|(a, b)| (a.to_owned(), b.to_owned()))
                                .ok_or_else(|| err("session parameter needs name=value"))
                        })
                        .collect::<Result<_, _>>()?;
                    r.sessions.push(SessionLine {
                        id: num(w[0])?,
                        message_id: num(w[1])?,
                        state: w[2].to_owned(),
                        reason: w[3].to_owned(),
                        params,
                    });
                }
                "dns" => r.dns.push(rest.to_owned()),
                "runtime" => r.runtimes.push(rest.to_owned()),
                "note" => r.notes.push(rest.to_owned()),
                "sweeps" => r.sweeps = num(rest)?,
                "verdict" => {
                    let w: Vec<&str> = rest.splitn(5, ' ').collect();
                    if w.len() < 4 {
                        return Err(err("verdict needs name, outcome, checks, failures"));
                    }
                    let count = |s: &str, key: &str| {
                        s.strip_prefix(key)
                            .and_then(|v| v.parse::<u64>().ok())
                            .ok_or_else(|| err(&format!("expected {key}N")))
                    };
                    let first = match w.get(4) {
                        Some(tail) => {
                            let (t, d) = tail.split_once(' ').unwrap_or((tail, ""));
                            Some((count(t, "first=")?, d.to_owned()))
                        }
                        None => None,
                    };
                    r.verdicts.push(VerdictLine {
                        name: w[0].to_owned(),
                        passed: w[1] == "pass",
                        checks: count(w[2], "checks=")?,
                        failures: count(w[3], "failures=")?,
                        first,
                    });
                }
                "expect" => {
                    let w: Vec<&str> = rest.splitn(3, ' ').collect();
                    if w.len() < 3 {
                        return Err(err("expect needs time, outcome and text"));
                    }
                    let (text, detail) = w[2].split_once(" :: ").unwrap_or((w[2], ""));
                    r.expects.push(ExpectLine {
                        time: num(w[0])?,
                        passed: w[1] == "pass",
                        text: text.to_owned(),
                        detail: detail.to_owned(),
                    });
                }
                "result" => {}
                _ => return Err(err(&format!("unknown line kind `{head}`"))),
            }
        }
        Ok(r)
    }
}

/// Which messages `ssmmp trace` prints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceFilter {
    All,
    /// Session id from the Manager snapshot.
    Session(u64),
    Instance(String, u64),
}

fn response_type(t: T) -> Option<T> {
    Some(match t {
        T::InitiationRequest => T::InitiationResponse,
        T::ExecutionRequest => T::ExecutionResponse,
        T::SessionRequest => T::SessionResponse,
        T::SourceCloseRequest => T::SourceCloseResponse,
        T::DestCloseRequest => T::DestCloseResponse,
        T::GracefulShutdownRequest => T::GracefulShutdownResponse,
        T::HardShutdownRequest => T::HardShutdownResponse,
        T::HealthControlRequest => T::HealthControlResponse,
        _ => return None,
    })
}

fn session_key_of(msg: &Message) -> Option<[String; 5]> {
    let get = |f: F| msg.get(f).map(str::to_owned);
    Some([
        get(F::SourceServiceInstanceNetworkAddress)?,
        get(F::SourcePlugPort)?,
        get(F::DestServiceInstanceNetworkAddress)?,
        get(F::DestSocketPort)?,
        get(F::DestSocketNewPort)?,
    ])
}

/// Messages selected by `filter`, in trace order. Responses are included
/// when their request matched.
pub fn filter_messages<'a>(
    report: &'a TraceReport,
    filter: &TraceFilter,
) -> Result<Vec<&'a MessageLine>, String> {
    let direct: Box<dyn Fn(&Message) -> bool> = match filter {
        TraceFilter::All => return Ok(report.messages().collect()),
        TraceFilter::Session(id) => {
            let s = report
                .sessions
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| format!("no session {id} in report"))?;
            let mid = s.message_id;
            let key: Option<[String; 5]> = (|| {
                Some([
                    s.param(F::SourceServiceInstanceNetworkAddress)?.to_owned(),
                    s.param(F::SourcePlugPort)?.to_owned(),
                    s.param(F::DestServiceInstanceNetworkAddress)?.to_owned(),
                    s.param(F::DestSocketPort)?.to_owned(),
                    s.param(F::DestSocketNewPort)?.to_owned(),
                ])
            })();
            Box::new(move |m: &Message| {
                let choreography = matches!(
                    m.msg_type,
                    T::SessionRequest | T::SessionResponse | T::SessionAck
                ) && m.message_id == mid;
                choreography || (key.is_some() && session_key_of(m) == key)
            })
        }
        TraceFilter::Instance(svc, id) => {
            let (svc, id) = (svc.clone(), id.to_string());
            Box::new(move |m: &Message| {
                [
                    (F::ServiceName, F::ServiceInstanceId),
                    (F::SourceServiceName, F::SourceServiceInstanceId),
                    (F::DestServiceName, F::DestServiceInstanceId),
                ]
                .iter()
                .any(|(n, i)| m.get(*n) == Some(svc.as_str()) && m.get(*i) == Some(id.as_str()))
            })
        }
    };
    let mut matched: BTreeMap<(T, u64), ()> = BTreeMap::new();
    let mut out = Vec::new();
    for line in report.messages() {
        let m = &line.message;
        let hit = direct(m) || matched.contains_key(&(m.msg_type, m.message_id));
        if hit {
            if let Some(rt) = response_type(m.msg_type) {
                matched.insert((rt, m.message_id), ());
            }
            if m.msg_type == T::SessionResponse {
                matched.insert((T::SessionAck, m.message_id), ());
            }
            out.push(line);
        }
    }
    Ok(out)
}
