//! SSMMP wire format.
//!
//! Every message is a sequence of `line_name: contents` lines. The first line
//! carries the message type, the second the message identifier, and (for
//! relayed messages) the third the route tag `sub_type`. The remaining lines
//! follow a fixed template per `(type, sub_type)` pair. On a stream, one empty
//! line terminates a message.

mod codec;
mod frame;
pub mod golden;
mod lists;
pub mod samples;
mod status;

use std::fmt;
use std::str::FromStr;

pub use codec::{parse_message, salvage_header, serialize_message, validate_message};
pub use frame::{Frame, FrameDecoder};
pub use lists::{
    format_name_list, format_pair_list, is_token, parse_name_list, parse_pair_list,
    parse_plug_configuration, parse_socket_configuration,
};
pub use status::{StatusClass, StatusCode};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("syntax error at line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("field `{field}` malformed: {reason}")]
    FieldSyntax { field: String, reason: String },
    #[error("field `{field}` out of range: {value}")]
    FieldRange { field: String, value: String },
    #[error("invalid message: {}", join_errors(.0))]
    InvalidMessage(Vec<WireError>),
}

fn join_errors(errors: &[WireError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl WireError {
    pub(crate) fn syntax(line: usize, reason: impl Into<String>) -> Self {
        WireError::Syntax {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn field(field: impl fmt::Display, reason: impl Into<String>) -> Self {
        WireError::FieldSyntax {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = ();

            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(()),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum! {
    MessageType {
        InitiationRequest => "initiation_request",
        InitiationResponse => "initiation_response",
        ExecutionRequest => "execution_request",
        ExecutionResponse => "execution_response",
        SessionRequest => "session_request",
        SessionResponse => "session_response",
        SessionAck => "session_ack",
        SourceCloseInfo => "source_service_session_close_info",
        DestCloseInfo => "dest_service_session_close_info",
        SourceCloseRequest => "source_service_session_close_request",
        SourceCloseResponse => "source_service_session_close_response",
        DestCloseRequest => "dest_service_session_close_request",
        DestCloseResponse => "dest_service_session_close_response",
        GracefulShutdownRequest => "graceful_shutdown_request",
        GracefulShutdownResponse => "graceful_shutdown_response",
        HardShutdownRequest => "hard_shutdown_request",
        HardShutdownResponse => "hard_shutdown_response",
        HealthControlRequest => "health_control_request",
        HealthControlResponse => "health_control_response",
    }
}

string_enum! {
    /// Route tag of a relayed message: who sends it to whom.
    SubType {
        ServiceToAgent => "service_to_agent",
        AgentToManager => "agent_to_Manager",
        ManagerToAgent => "Manager_to_agent",
        AgentToService => "agent_to_service",
        SourceServiceToAgent => "source_service_to_agent",
        DestServiceToAgent => "dest_service_to_agent",
        AgentToSourceService => "agent_to_source_service",
        AgentToDestService => "agent_to_dest_service",
        ServiceInstanceToAgent => "service_instance_to_agent",
        AgentToServiceInstance => "agent_to_service_instance",
    }
}

string_enum! {
    FieldName {
        Status => "status",
        AgentNetworkAddress => "agent_network_address",
        ServiceRepository => "service_repository",
        ServiceName => "service_name",
        ServiceInstanceId => "service_instance_id",
        SocketConfiguration => "socket_configuration",
        PlugConfiguration => "plug_configuration",
        SourceServiceName => "source_service_name",
        SourceServiceInstanceNetworkAddress => "source_service_instance_network_address",
        SourceServiceInstanceId => "source_service_instance_id",
        SourcePlugName => "source_plug_name",
        SourcePlugPort => "source_plug_port",
        DestServiceName => "dest_service_name",
        DestServiceInstanceNetworkAddress => "dest_service_instance_network_address",
        DestServiceInstanceId => "dest_service_instance_id",
        DestSocketName => "dest_socket_name",
        DestSocketPort => "dest_socket_port",
        DestSocketNewPort => "dest_socket_new_port",
    }
}

/// Content syntax of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Status,
    Address,
    Token,
    Id,
    Port,
    NameList,
    SocketPairs,
    PlugPairs,
}

impl FieldName {
    pub fn kind(self) -> FieldKind {
        use FieldName::*;
        match self {
            Status => FieldKind::Status,
            AgentNetworkAddress
            | SourceServiceInstanceNetworkAddress
            | DestServiceInstanceNetworkAddress => FieldKind::Address,
            ServiceName | SourceServiceName | SourcePlugName | DestServiceName | DestSocketName => {
                FieldKind::Token
            }
            ServiceInstanceId | SourceServiceInstanceId | DestServiceInstanceId => FieldKind::Id,
            SourcePlugPort | DestSocketPort | DestSocketNewPort => FieldKind::Port,
            ServiceRepository => FieldKind::NameList,
            SocketConfiguration => FieldKind::SocketPairs,
            PlugConfiguration => FieldKind::PlugPairs,
        }
    }
}

use FieldName as F;

/// All session parameters the source instance knows: everything except the
/// dest instance id.
pub const SOURCE_VIEW: &[FieldName] = &[
    F::SourceServiceName,
    F::SourceServiceInstanceNetworkAddress,
    F::SourceServiceInstanceId,
    F::SourcePlugName,
    F::SourcePlugPort,
    F::DestServiceName,
    F::DestServiceInstanceNetworkAddress,
    F::DestSocketName,
    F::DestSocketPort,
    F::DestSocketNewPort,
];

/// All session parameters the dest instance knows: everything except the
/// source instance id and source service name.
pub const DEST_VIEW: &[FieldName] = &[
    F::SourceServiceInstanceNetworkAddress,
    F::SourcePlugName,
    F::SourcePlugPort,
    F::DestServiceName,
    F::DestServiceInstanceNetworkAddress,
    F::DestServiceInstanceId,
    F::DestSocketName,
    F::DestSocketPort,
    F::DestSocketNewPort,
];

const STATUS_ONLY: &[FieldName] = &[F::Status];
const INSTANCE_REF: &[FieldName] = &[F::ServiceName, F::ServiceInstanceId];
const SESSION_REQUEST_FROM_SERVICE: &[FieldName] = &[
    F::SourceServiceName,
    F::SourceServiceInstanceId,
    F::SourcePlugName,
    F::DestServiceName,
    F::DestSocketName,
];
const SESSION_REQUEST_FROM_AGENT: &[FieldName] = &[
    F::AgentNetworkAddress,
    F::SourceServiceName,
    F::SourceServiceInstanceId,
    F::SourcePlugName,
    F::DestServiceName,
    F::DestSocketName,
];
const SESSION_RESPONSE: &[FieldName] = &[
    F::Status,
    F::DestServiceInstanceNetworkAddress,
    F::DestSocketPort,
];
const SESSION_ACK: &[FieldName] = &[F::Status, F::SourcePlugPort, F::DestSocketNewPort];

/// Field lines following the header for a `(type, sub_type)` pair, or `None`
/// when the pair is not part of the protocol.
pub fn template(msg_type: MessageType, sub_type: Option<SubType>) -> Option<&'static [FieldName]> {
    use MessageType as T;
    use SubType as S;
    let fields: &'static [FieldName] = match (msg_type, sub_type) {
        (T::InitiationRequest, None) => &[F::AgentNetworkAddress, F::ServiceRepository],
        (T::InitiationResponse, None) => STATUS_ONLY,
        (T::ExecutionRequest, None) => &[
            F::AgentNetworkAddress,
            F::ServiceName,
            F::ServiceInstanceId,
            F::SocketConfiguration,
            F::PlugConfiguration,
        ],
        (T::ExecutionResponse, None) => STATUS_ONLY,
        (T::SessionRequest, Some(S::ServiceToAgent)) => SESSION_REQUEST_FROM_SERVICE,
        (T::SessionRequest, Some(S::AgentToManager)) => SESSION_REQUEST_FROM_AGENT,
        (T::SessionResponse, Some(S::ManagerToAgent | S::AgentToService)) => SESSION_RESPONSE,
        (T::SessionAck, Some(S::ServiceToAgent | S::AgentToManager)) => SESSION_ACK,
        (T::SourceCloseInfo, Some(S::SourceServiceToAgent | S::AgentToManager)) => SOURCE_VIEW,
        (T::DestCloseInfo, Some(S::DestServiceToAgent | S::AgentToManager)) => DEST_VIEW,
        (T::SourceCloseRequest, Some(S::ManagerToAgent | S::AgentToSourceService)) => SOURCE_VIEW,
        (T::SourceCloseResponse, Some(S::SourceServiceToAgent | S::AgentToManager)) => STATUS_ONLY,
        (T::DestCloseRequest, Some(S::ManagerToAgent | S::AgentToDestService)) => DEST_VIEW,
        (T::DestCloseResponse, Some(S::DestServiceToAgent | S::AgentToManager)) => STATUS_ONLY,
        (T::GracefulShutdownRequest, Some(S::ManagerToAgent | S::AgentToServiceInstance)) => {
            INSTANCE_REF
        }
        (T::GracefulShutdownResponse, Some(S::ServiceInstanceToAgent | S::AgentToManager)) => {
            STATUS_ONLY
        }
        (T::HardShutdownRequest, Some(S::ManagerToAgent)) => INSTANCE_REF,
        (T::HardShutdownResponse, Some(S::AgentToManager)) => STATUS_ONLY,
        (T::HealthControlRequest, Some(S::AgentToServiceInstance)) => INSTANCE_REF,
        (T::HealthControlResponse, Some(S::ServiceInstanceToAgent | S::AgentToManager)) => {
            &[F::ServiceName, F::ServiceInstanceId, F::Status]
        }
        _ => return None,
    };
    Some(fields)
}

impl MessageType {
    /// Route tags legal for this type; empty for the unrelayed types.
    pub fn sub_types(self) -> Vec<SubType> {
        SubType::ALL
            .iter()
            .copied()
            .filter(|s| template(self, Some(*s)).is_some())
            .collect()
    }

    pub fn has_sub_type(self) -> bool {
        template(self, None).is_none()
    }
}

/// Every `(type, sub_type)` pair of the protocol, in declaration order.
pub fn all_variants() -> Vec<(MessageType, Option<SubType>)> {
    let mut out = Vec::new();
    for &t in MessageType::ALL {
        if template(t, None).is_some() {
            out.push((t, None));
        }
        for s in t.sub_types() {
            out.push((t, Some(s)));
        }
    }
    out
}

/// One SSMMP message. Values are plain text; [`validate_message`] checks them
/// against the template and field grammar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub msg_type: MessageType,
    pub message_id: u64,
    pub sub_type: Option<SubType>,
    pub fields: Vec<(FieldName, String)>,
}

impl Message {
    pub fn new(msg_type: MessageType, message_id: u64, sub_type: Option<SubType>) -> Self {
        Message {
            msg_type,
            message_id,
            sub_type,
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, name: FieldName, value: impl ToString) -> Self {
        self.fields.push((name, value.to_string()));
        self
    }

    pub fn get(&self, name: FieldName) -> Option<&str> {
        self.fields
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn has(&self, name: FieldName) -> bool {
        self.fields.iter().any(|(n, _)| *n == name)
    }

    fn require(&self, name: FieldName) -> Result<&str, WireError> {
        self.get(name)
            .ok_or_else(|| WireError::TemplateMismatch(format!("missing `{name}`")))
    }

    pub fn text(&self, name: FieldName) -> Result<String, WireError> {
        self.require(name).map(str::to_owned)
    }

    pub fn number(&self, name: FieldName) -> Result<u64, WireError> {
        let raw = self.require(name)?;
        raw.parse()
            .map_err(|_| WireError::field(name, format!("`{raw}` is not an integer")))
    }

    /// Port value; `0` is returned for the placeholder carried by failed
    /// session responses and acks.
    pub fn port(&self, name: FieldName) -> Result<u16, WireError> {
        let n = self.number(name)?;
        u16::try_from(n).map_err(|_| WireError::FieldRange {
            field: name.to_string(),
            value: n.to_string(),
        })
    }

    pub fn address(&self, name: FieldName) -> Result<std::net::IpAddr, WireError> {
        let raw = self.require(name)?;
        raw.parse()
            .map_err(|_| WireError::field(name, format!("`{raw}` is not an address")))
    }

    pub fn status(&self) -> Result<StatusCode, WireError> {
        let n = self.number(FieldName::Status)?;
        StatusCode::new(n).map_err(|_| WireError::FieldRange {
            field: "status".into(),
            value: n.to_string(),
        })
    }

    /// Copy of this message with a different route tag and the given fields
    /// inserted at the front.
    pub fn rerouted(&self, sub_type: SubType, prepend: &[(FieldName, String)]) -> Message {
        let mut fields = prepend.to_vec();
        fields.extend(self.fields.iter().cloned());
        Message {
            msg_type: self.msg_type,
            message_id: self.message_id,
            sub_type: Some(sub_type),
            fields,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WireError> {
        serialize_message(self)
    }

    /// Single-line rendering for journals: lines joined by ` | `.
    pub fn one_line(&self) -> String {
        let mut parts = vec![
            format!("type: {}", self.msg_type),
            format!("message_id: {}", self.message_id),
        ];
        if let Some(s) = self.sub_type {
            parts.push(format!("sub_type: {s}"));
        }
        for (n, v) in &self.fields {
            parts.push(format!("{n}: {v}"));
        }
        parts.join(" | ")
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "type: {}", self.msg_type)?;
        writeln!(f, "message_id: {}", self.message_id)?;
        if let Some(s) = self.sub_type {
            writeln!(f, "sub_type: {s}")?;
        }
        for (n, v) in &self.fields {
            writeln!(f, "{n}: {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_count_covers_both_relay_directions() {
        let variants = all_variants();
        assert_eq!(variants.len(), 31);
        assert!(variants.contains(&(MessageType::SessionAck, Some(SubType::AgentToManager))));
        assert!(variants.contains(&(
            MessageType::DestCloseRequest,
            Some(SubType::AgentToDestService)
        )));
        assert!(!variants.contains(&(
            MessageType::HardShutdownRequest,
            Some(SubType::AgentToServiceInstance)
        )));
    }

    #[test]
    fn session_request_sub_types() {
        assert_eq!(
            MessageType::SessionRequest.sub_types(),
            vec![SubType::ServiceToAgent, SubType::AgentToManager]
        );
        assert!(!MessageType::InitiationRequest.has_sub_type());
    }

    #[test]
    fn views_are_asymmetric() {
        assert!(!SOURCE_VIEW.contains(&FieldName::DestServiceInstanceId));
        assert!(!DEST_VIEW.contains(&FieldName::SourceServiceInstanceId));
        assert!(!DEST_VIEW.contains(&FieldName::SourceServiceName));
        assert_eq!(SOURCE_VIEW.len(), 10);
        assert_eq!(DEST_VIEW.len(), 9);
    }
}
