//! One representative message per `(type, sub_type)` variant. These back the
//! golden conformance files.

use super::{all_variants, template, FieldName, Message, MessageType, SubType};

/// Value used for each field in the sample messages: session (A,(P,S),B)
/// between instance 1 of A on fd00::a1 and instance 2 of B on fd00::a2.
fn sample_value(msg_type: MessageType, name: FieldName) -> String {
    use FieldName::*;
    match name {
        Status => match msg_type {
            MessageType::ExecutionResponse => "201",
            MessageType::HealthControlResponse => "429",
            _ => "200",
        }
        .into(),
        AgentNetworkAddress | SourceServiceInstanceNetworkAddress => "fd00::a1".into(),
        DestServiceInstanceNetworkAddress => "fd00::a2".into(),
        ServiceRepository => "(A; B)".into(),
        ServiceName => "service-1".into(),
        ServiceInstanceId => "1".into(),
        SocketConfiguration => "((S2, 20000))".into(),
        PlugConfiguration => "((P6, service-4); (P7, service-3))".into(),
        SourceServiceName => "A".into(),
        SourceServiceInstanceId => "1".into(),
        SourcePlugName => "P".into(),
        SourcePlugPort => "40001".into(),
        DestServiceName => "B".into(),
        DestServiceInstanceId => "2".into(),
        DestSocketName => "S".into(),
        DestSocketPort => "20010".into(),
        DestSocketNewPort => "40002".into(),
    }
}

pub fn sample(msg_type: MessageType, sub_type: Option<SubType>) -> Option<Message> {
    let fields = template(msg_type, sub_type)?;
    let id = 1 + MessageType::ALL
        .iter()
        .position(|t| *t == msg_type)
        .unwrap_or(0) as u64;
    let mut m = Message::new(msg_type, id, sub_type);
    for &f in fields {
        m = m.with(f, sample_value(msg_type, f));
    }
    Some(m)
}

pub fn all() -> Vec<Message> {
    all_variants()
        .into_iter()
        .filter_map(|(t, s)| sample(t, s))
        .collect()
}

/// Golden file name for a variant, e.g. `session_ack.agent_to_Manager.msg`.
pub fn file_name(msg_type: MessageType, sub_type: Option<SubType>) -> String {
    match sub_type {
        Some(s) => format!("{msg_type}.{s}.msg"),
        None => format!("{msg_type}.msg"),
    }
}
