use std::net::IpAddr;

use super::lists::{self, is_token};
use super::{template, FieldKind, FieldName, Message, MessageType, StatusCode, SubType, WireError};

/// Serializes a message as LF-terminated lines followed by one empty line.
pub fn serialize_message(m: &Message) -> Result<Vec<u8>, WireError> {
    validate_message(m).map_err(WireError::InvalidMessage)?;
    let mut out = m.to_string();
    out.push('\n');
    Ok(out.into_bytes())
}

enum Number {
    Value(u64),
    Malformed,
    Overflow,
}

fn canonical_number(text: &str) -> Number {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Number::Malformed;
    }
    if text.len() > 1 && text.starts_with('0') {
        return Number::Malformed;
    }
    match text.parse::<u64>() {
        Ok(v) => Number::Value(v),
        Err(_) => Number::Overflow,
    }
}

fn is_canonical_address(text: &str) -> bool {
    text.parse::<IpAddr>()
        .map(|a| a.to_string() == text)
        .unwrap_or(false)
}

fn allows_port_placeholder(m: &Message) -> bool {
    matches!(
        m.msg_type,
        MessageType::SessionResponse | MessageType::SessionAck
    ) && m
        .get(FieldName::Status)
        .and_then(|s| s.parse::<u64>().ok())
        .and_then(|s| StatusCode::new(s).ok())
        .is_some_and(|s| !s.is_success())
}

fn check_field(m: &Message, name: FieldName, value: &str) -> Result<(), WireError> {
    let range = || WireError::FieldRange {
        field: name.to_string(),
        value: value.to_owned(),
    };
    match name.kind() {
        FieldKind::Status => match canonical_number(value) {
            Number::Value(v) if StatusCode::new(v).is_ok() => Ok(()),
            Number::Malformed => Err(WireError::field(name, "not a status code")),
            _ => Err(range()),
        },
        FieldKind::Id => match canonical_number(value) {
            Number::Value(0) | Number::Overflow => Err(range()),
            Number::Value(_) => Ok(()),
            Number::Malformed => Err(WireError::field(name, "not a positive integer")),
        },
        FieldKind::Port => match canonical_number(value) {
            Number::Value(0) if allows_port_placeholder(m) => Ok(()),
            Number::Value(v) if (1..=65535).contains(&v) => Ok(()),
            Number::Malformed => Err(WireError::field(name, "not a port number")),
            _ => Err(range()),
        },
        FieldKind::Address => {
            if is_canonical_address(value) {
                Ok(())
            } else {
                Err(WireError::field(name, "not a canonical IPv6/IPv4 address"))
            }
        }
        FieldKind::Token => {
            if is_token(value) {
                Ok(())
            } else {
                Err(WireError::field(name, "not a token"))
            }
        }
        FieldKind::NameList => lists::parse_name_list(value)
            .map(drop)
            .map_err(|e| WireError::field(name, e.to_string())),
        FieldKind::SocketPairs => {
            let pairs =
                lists::parse_pair_list(value).map_err(|e| WireError::field(name, e.to_string()))?;
            for (_, port) in pairs {
                match canonical_number(&port) {
                    Number::Value(v) if (1..=65535).contains(&v) => {}
                    Number::Malformed => {
                        return Err(WireError::field(name, format!("`{port}` is not a port")))
                    }
                    _ => {
                        return Err(WireError::FieldRange {
                            field: name.to_string(),
                            value: port,
                        })
                    }
                }
            }
            Ok(())
        }
        FieldKind::PlugPairs => lists::parse_plug_configuration(value)
            .map(drop)
            .map_err(|e| WireError::field(name, e.to_string())),
    }
}

/// Template conformance plus field-level syntax. Never panics.
pub fn validate_message(m: &Message) -> Result<(), Vec<WireError>> {
    let mut errors = Vec::new();
    if m.message_id == 0 {
        errors.push(WireError::FieldRange {
            field: "message_id".into(),
            value: "0".into(),
        });
    }
    match template(m.msg_type, m.sub_type) {
        None => errors.push(WireError::TemplateMismatch(match m.sub_type {
            Some(s) => format!("sub_type `{s}` is not defined for `{}`", m.msg_type),
            None => format!("`{}` requires a sub_type", m.msg_type),
        })),
        Some(expected) => {
            let names: Vec<FieldName> = m.fields.iter().map(|(n, _)| *n).collect();
            if names != expected {
                errors.push(WireError::TemplateMismatch(describe_mismatch(
                    expected, &names,
                )));
            }
        }
    }
    for (name, value) in &m.fields {
        if let Err(e) = check_field(m, *name, value) {
            errors.push(e);
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn describe_mismatch(expected: &[FieldName], got: &[FieldName]) -> String {
    if let Some(missing) = expected.iter().find(|n| !got.contains(n)) {
        return format!("missing `{missing}`");
    }
    if let Some(extra) = got.iter().find(|n| !expected.contains(n)) {
        return format!("unexpected `{extra}`");
    }
    if got.len() != expected.len() {
        return "duplicate lines".into();
    }
    "lines out of order".into()
}

fn split_line(line: &str, number: usize) -> Result<(&str, &str), WireError> {
    let (name, rest) = line
        .split_once(':')
        .ok_or_else(|| WireError::syntax(number, "expected `line_name: contents`"))?;
    if !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') || name.is_empty() {
        return Err(WireError::syntax(number, format!("bad line name `{name}`")));
    }
    let contents = rest
        .strip_prefix(' ')
        .ok_or_else(|| WireError::syntax(number, "expected a single space after `:`"))?;
    if contents.is_empty() || contents.starts_with(' ') || contents.ends_with(' ') {
        return Err(WireError::syntax(
            number,
            "contents must be non-empty and unpadded",
        ));
    }
    if contents.chars().any(char::is_control) {
        return Err(WireError::syntax(number, "control character in contents"));
    }
    Ok((name, contents))
}

/// Parses exactly one framed message (lines plus the terminating empty line).
pub fn parse_message(bytes: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(bytes).map_err(|_| WireError::syntax(0, "not UTF-8"))?;
    if text.is_empty() {
        return Err(WireError::syntax(0, "empty input"));
    }
    let body = text
        .strip_suffix("\n\n")
        .ok_or_else(|| WireError::syntax(0, "message must end with an empty line"))?;
    let lines: Vec<&str> = body.split('\n').collect();
    let mut parsed = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        parsed.push(split_line(line, i + 1)?);
    }

    let (name, contents) = parsed[0];
    if name != "type" {
        return Err(WireError::syntax(1, "first line must be `type`"));
    }
    let msg_type: MessageType = contents
        .parse()
        .map_err(|()| WireError::UnknownType(contents.to_owned()))?;

    let (name, contents) = *parsed
        .get(1)
        .ok_or_else(|| WireError::syntax(2, "missing message_id"))?;
    if name != "message_id" {
        return Err(WireError::syntax(2, "second line must be `message_id`"));
    }
    let message_id = match canonical_number(contents) {
        Number::Value(0) | Number::Overflow => {
            return Err(WireError::FieldRange {
                field: "message_id".into(),
                value: contents.to_owned(),
            })
        }
        Number::Value(v) => v,
        Number::Malformed => {
            return Err(WireError::syntax(
                2,
                "message_id must be a positive integer",
            ))
        }
    };

    let mut rest = &parsed[2..];
    let mut sub_type = None;
    if let Some(&(name, contents)) = rest.first() {
        if name == "sub_type" {
            let s: SubType = contents.parse().map_err(|()| {
                WireError::TemplateMismatch(format!("unknown sub_type `{contents}`"))
            })?;
            sub_type = Some(s);
            rest = &rest[1..];
        }
    }

    let mut fields = Vec::with_capacity(rest.len());
    for &(name, contents) in rest {
        let field: FieldName = name
            .parse()
            .map_err(|()| WireError::TemplateMismatch(format!("unknown line `{name}`")))?;
        fields.push((field, contents.to_owned()));
    }
    let m = Message {
        msg_type,
        message_id,
        sub_type,
        fields,
    };
    match validate_message(&m) {
        Ok(()) => Ok(m),
        Err(mut errors) => Err(errors.remove(0)),
    }
}

/// Best-effort recovery of the type and id of a message that failed to
/// parse, so a receiver can still answer it with a 400.
pub fn salvage_header(bytes: &[u8]) -> Option<(MessageType, u64)> {
    let text = std::str::from_utf8(bytes).ok()?;
    let mut lines = text.lines();
    let msg_type = lines.next()?.strip_prefix("type: ")?.trim().parse().ok()?;
    let id = lines
        .next()?
        .strip_prefix("message_id: ")?
        .trim()
        .parse()
        .ok()?;
    Some((msg_type, id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::samples;

    fn fig_execution_request() -> &'static str {
        "type: execution_request\n\
         message_id: 3\n\
         agent_network_address: fd00::a2\n\
         service_name: service-1\n\
         service_instance_id: 1\n\
         socket_configuration: ((S2, 20000))\n\
         plug_configuration: ((P6, service-4); (P7, service-3))\n\n"
    }

    #[test]
    fn parses_execution_request_template() {
        let m = parse_message(fig_execution_request().as_bytes()).unwrap();
        assert_eq!(m.msg_type, MessageType::ExecutionRequest);
        assert_eq!(m.message_id, 3);
        assert_eq!(m.sub_type, None);
        assert_eq!(m.get(FieldName::ServiceName), Some("service-1"));
        assert_eq!(
            serialize_message(&m).unwrap(),
            fig_execution_request().as_bytes()
        );
    }

    #[test]
    fn initiation_request_body() {
        let m = Message::new(MessageType::InitiationRequest, 7, None)
            .with(FieldName::AgentNetworkAddress, "fd00::a1")
            .with(FieldName::ServiceRepository, "(A; B)");
        let text = String::from_utf8(serialize_message(&m).unwrap()).unwrap();
        assert_eq!(
            text,
            "type: initiation_request\nmessage_id: 7\nagent_network_address: fd00::a1\nservice_repository: (A; B)\n\n"
        );
    }

    #[test]
    fn graceful_shutdown_response_lines() {
        let m = Message::new(
            MessageType::GracefulShutdownResponse,
            9,
            Some(SubType::AgentToManager),
        )
        .with(FieldName::Status, 200);
        let text = String::from_utf8(serialize_message(&m).unwrap()).unwrap();
        assert_eq!(
            text,
            "type: graceful_shutdown_response\nmessage_id: 9\nsub_type: agent_to_Manager\nstatus: 200\n\n"
        );
        assert_eq!(text.lines().filter(|l| !l.is_empty()).count(), 4);
    }

    #[test]
    fn empty_input_is_syntax_error() {
        assert!(matches!(parse_message(b""), Err(WireError::Syntax { .. })));
    }

    #[test]
    fn distinguishes_error_kinds() {
        assert!(matches!(
            parse_message(b"type: teleport\nmessage_id: 1\n\n"),
            Err(WireError::UnknownType(_))
        ));
        assert!(matches!(
            parse_message(b"type: execution_response\nmessage_id: 1\nstatus: 200\nstatus: 200\n\n"),
            Err(WireError::TemplateMismatch(_))
        ));
        assert!(matches!(
            parse_message(b"type: execution_response\nmessage_id: 1\nbogus: 1\n\n"),
            Err(WireError::TemplateMismatch(_))
        ));
        assert!(matches!(
            parse_message(b"type: execution_response\nmessage_id: 1\nstatus:200\n\n"),
            Err(WireError::Syntax { .. })
        ));
        assert!(matches!(
            parse_message(b"message_id: 1\ntype: execution_response\nstatus: 200\n\n"),
            Err(WireError::Syntax { .. })
        ));
        assert!(matches!(
            parse_message(b"type: execution_response\nmessage_id: 1\nstatus: 200\n"),
            Err(WireError::Syntax { .. })
        ));
    }

    #[test]
    fn rejects_reordered_lines() {
        let bytes = b"type: session_ack\nmessage_id: 4\nsub_type: service_to_agent\nsource_plug_port: 41000\nstatus: 200\ndest_socket_new_port: 40001\n\n";
        assert!(matches!(
            parse_message(bytes),
            Err(WireError::TemplateMismatch(_))
        ));
    }

    #[test]
    fn valid_session_ack() {
        let m = Message::new(MessageType::SessionAck, 4, Some(SubType::ServiceToAgent))
            .with(FieldName::Status, 200)
            .with(FieldName::SourcePlugPort, 41000)
            .with(FieldName::DestSocketNewPort, 20555);
        assert_eq!(validate_message(&m), Ok(()));
    }

    #[test]
    fn session_ack_missing_new_port() {
        let m = Message::new(MessageType::SessionAck, 4, Some(SubType::ServiceToAgent))
            .with(FieldName::Status, 200)
            .with(FieldName::SourcePlugPort, 41000);
        let errors = validate_message(&m).unwrap_err();
        assert!(matches!(errors[0], WireError::TemplateMismatch(_)));
    }

    #[test]
    fn port_out_of_range() {
        let m = Message::new(MessageType::SessionAck, 4, Some(SubType::ServiceToAgent))
            .with(FieldName::Status, 200)
            .with(FieldName::SourcePlugPort, 70000)
            .with(FieldName::DestSocketNewPort, 20555);
        let errors = validate_message(&m).unwrap_err();
        assert!(matches!(errors[0], WireError::FieldRange { .. }));
    }

    #[test]
    fn port_placeholder_only_on_failure() {
        let ok = Message::new(
            MessageType::SessionResponse,
            4,
            Some(SubType::ManagerToAgent),
        )
        .with(FieldName::Status, 200)
        .with(FieldName::DestServiceInstanceNetworkAddress, "::")
        .with(FieldName::DestSocketPort, 0);
        assert!(validate_message(&ok).is_err());
        let failed = Message::new(
            MessageType::SessionResponse,
            4,
            Some(SubType::ManagerToAgent),
        )
        .with(FieldName::Status, 406)
        .with(FieldName::DestServiceInstanceNetworkAddress, "::")
        .with(FieldName::DestSocketPort, 0);
        assert_eq!(validate_message(&failed), Ok(()));
    }

    #[test]
    fn rejects_non_canonical_numbers_and_addresses() {
        let base = |addr: &str, id: &str| {
            format!(
                "type: initiation_request\nmessage_id: {id}\nagent_network_address: {addr}\nservice_repository: ()\n\n"
            )
        };
        assert!(parse_message(base("fd00::a1", "1").as_bytes()).is_ok());
        assert!(parse_message(base("10.0.0.1", "1").as_bytes()).is_ok());
        assert!(parse_message(base("fd00:0::a1", "1").as_bytes()).is_err());
        assert!(parse_message(base("fd00::a1", "01").as_bytes()).is_err());
        assert!(parse_message(base("fd00::a1", "0").as_bytes()).is_err());
        assert!(parse_message(base("not-an-address", "1").as_bytes()).is_err());
    }

    #[test]
    fn serialize_rejects_invalid() {
        let m = Message::new(MessageType::SessionAck, 0, None);
        assert!(matches!(
            serialize_message(&m),
            Err(WireError::InvalidMessage(_))
        ));
    }

    #[test]
    fn every_sample_roundtrips() {
        for m in samples::all() {
            let bytes = serialize_message(&m).unwrap();
            assert_eq!(parse_message(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn salvage_reads_header() {
        let bytes = b"type: initiation_request\nmessage_id: 12\nagent_network_address: fd00::1\nservice_repository: (A;B)\n\n";
        assert!(parse_message(bytes).is_err());
        assert_eq!(
            salvage_header(bytes),
            Some((MessageType::InitiationRequest, 12))
        );
    }
}
