//! `(a; b; c)` name lists and `((x, 1); (y, 2))` pair lists.

use super::WireError;

pub fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

fn list_error(reason: impl Into<String>) -> WireError {
    WireError::syntax(0, reason)
}

fn check_token(s: &str) -> Result<(), WireError> {
    if is_token(s) {
        Ok(())
    } else {
        Err(list_error(format!("`{s}` is not a token")))
    }
}

pub fn format_name_list<S: AsRef<str>>(names: &[S]) -> Result<String, WireError> {
    for n in names {
        check_token(n.as_ref())?;
    }
    let inner: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
    Ok(format!("({})", inner.join("; ")))
}

fn strip_parens(text: &str) -> Result<&str, WireError> {
    text.strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| list_error(format!("`{text}` is not parenthesised")))
}

pub fn parse_name_list(text: &str) -> Result<Vec<String>, WireError> {
    let inner = strip_parens(text)?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split("; ")
        .map(|item| check_token(item).map(|()| item.to_owned()))
        .collect()
}

pub fn format_pair_list<A: AsRef<str>, B: ToString>(pairs: &[(A, B)]) -> Result<String, WireError> {
    let mut items = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let b = b.to_string();
        check_token(a.as_ref())?;
        check_token(&b)?;
        items.push(format!("({}, {})", a.as_ref(), b));
    }
    Ok(format!("({})", items.join("; ")))
}

pub fn parse_pair_list(text: &str) -> Result<Vec<(String, String)>, WireError> {
    let inner = strip_parens(text)?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split("; ")
        .map(|item| {
            let body = strip_parens(item)?;
            let (a, b) = body
                .split_once(", ")
                .ok_or_else(|| list_error(format!("`{item}` is not a pair")))?;
            check_token(a)?;
            check_token(b)?;
            Ok((a.to_owned(), b.to_owned()))
        })
        .collect()
}

pub(crate) fn parse_port(text: &str) -> Option<u16> {
    if text.is_empty() || text.len() > 5 || !text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if text.len() > 1 && text.starts_with('0') {
        return None;
    }
    match text.parse::<u32>() {
        Ok(p) if (1..=65535).contains(&p) => Some(p as u16),
        _ => None,
    }
}

/// `(socket_name, port_number)` sequence.
pub fn parse_socket_configuration(text: &str) -> Result<Vec<(String, u16)>, WireError> {
    parse_pair_list(text)?
        .into_iter()
        .map(|(s, p)| match parse_port(&p) {
            Some(port) => Ok((s, port)),
            None => Err(list_error(format!("`{p}` is not a port"))),
        })
        .collect()
}

/// `(plug_name, service_name)` sequence.
pub fn parse_plug_configuration(text: &str) -> Result<Vec<(String, String)>, WireError> {
    parse_pair_list(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn name_list_forms() {
        assert_eq!(format_name_list(&["A", "B"]).unwrap(), "(A; B)");
        assert_eq!(format_name_list::<&str>(&[]).unwrap(), "()");
        assert_eq!(parse_name_list("(A; B)").unwrap(), vec!["A", "B"]);
        assert!(parse_name_list("()").unwrap().is_empty());
    }

    #[test]
    fn name_list_errors() {
        for bad in [
            "(A; B", "A; B)", "(A;B)", "(A;  B)", "(A; )", "((A))", "(A B)", "", "(a:b)",
        ] {
            assert!(parse_name_list(bad).is_err(), "{bad}");
        }
        assert!(format_name_list(&["a;b"]).is_err());
        assert!(format_name_list(&["a)"]).is_err());
        assert!(format_name_list(&[""]).is_err());
    }

    #[test]
    fn pair_list_forms() {
        assert_eq!(format_pair_list(&[("S2", 20001)]).unwrap(), "((S2, 20001))");
        assert_eq!(format_pair_list::<&str, u16>(&[]).unwrap(), "()");
        assert_eq!(
            format_pair_list(&[("P6", "service-4"), ("P7", "service-3")]).unwrap(),
            "((P6, service-4); (P7, service-3))"
        );
        assert_eq!(
            parse_socket_configuration("((S2, 20000); (S3, 80))").unwrap(),
            vec![("S2".to_owned(), 20000), ("S3".to_owned(), 80)]
        );
    }

    #[test]
    fn pair_list_errors() {
        for bad in [
            "((S2, 20001)",
            "(S2, 20001)",
            "((S2,20001))",
            "((S2, 1, 2))",
            "((S2, 20001);(S3, 1))",
        ] {
            assert!(parse_pair_list(bad).is_err(), "{bad}");
        }
        for bad in ["((S2, 0))", "((S2, 70000))", "((S2, 080))", "((S2, x))"] {
            assert!(parse_socket_configuration(bad).is_err(), "{bad}");
        }
    }

    fn token() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_.-]{1,12}"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn name_list_roundtrip(names in prop::collection::vec(token(), 0..8)) {
            let text = format_name_list(&names).unwrap();
            prop_assert_eq!(parse_name_list(&text).unwrap(), names);
        }

        #[test]
        fn socket_config_roundtrip(pairs in prop::collection::vec((token(), 1u16..=65535), 0..6)) {
            let text = format_pair_list(&pairs).unwrap();
            prop_assert_eq!(parse_socket_configuration(&text).unwrap(), pairs);
        }

        #[test]
        fn plug_config_roundtrip(pairs in prop::collection::vec((token(), token()), 0..6)) {
            let text = format_pair_list(&pairs).unwrap();
            prop_assert_eq!(parse_plug_configuration(&text).unwrap(), pairs);
        }
    }
}
