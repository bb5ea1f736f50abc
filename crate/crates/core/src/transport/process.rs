use super::{Ctx, Event};
use crate::agent::Agent;
use crate::manager::Manager;
use crate::service_runtime::ServiceRuntime;

pub trait Actor {
    fn handle(&mut self, event: Event, ctx: &mut dyn Ctx);
}

/// Any process a driver can host.
#[derive(Debug)]
pub enum Process {
    Manager(Box<Manager>),
    Agent(Box<Agent>),
    Runtime(Box<ServiceRuntime>),
}

impl Process {
    pub fn label(&self, node: impl std::fmt::Display) -> String {
        match self {
            Process::Manager(_) => format!("manager@{node}"),
            Process::Agent(_) => format!("agent@{node}"),
            Process::Runtime(r) => format!("{}#{}@{node}", r.service_name(), r.instance_id()),
        }
    }

    pub fn as_manager(&self) -> Option<&Manager> {
        match self {
            Process::Manager(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_manager_mut(&mut self) -> Option<&mut Manager> {
        match self {
            Process::Manager(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_agent(&self) -> Option<&Agent> {
        match self {
            Process::Agent(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_runtime(&self) -> Option<&ServiceRuntime> {
        match self {
            Process::Runtime(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_runtime_mut(&mut self) -> Option<&mut ServiceRuntime> {
        match self {
            Process::Runtime(r) => Some(r),
            _ => None,
        }
    }

    pub fn has_pending_correlations(&self) -> bool {
        match self {
            Process::Manager(m) => m.has_pending_correlations(),
            Process::Agent(a) => a.has_pending_correlations(),
            Process::Runtime(r) => r.has_pending_correlations(),
        }
    }
}

impl Actor for Process {
    fn handle(&mut self, event: Event, ctx: &mut dyn Ctx) {
        match self {
            Process::Manager(m) => m.handle(event, ctx),
            Process::Agent(a) => a.handle(event, ctx),
            Process::Runtime(r) => r.handle(event, ctx),
        }
    }
}
