//! Parser acceptance against an independent grammar: regexes for line shape
//! and list syntax, numeric range checks, std's canonical address form.

use std::net::IpAddr;
use std::sync::LazyLock;

use proptest::prelude::*;
use regex::Regex;

use ssmmp::wire::{
    all_variants, parse_message, serialize_message, template, FieldKind, MessageType, SubType,
};

static LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([A-Za-z0-9_]+): ([^ \x00-\x1f\x7f](?:[^\x00-\x1f\x7f]*[^ \x00-\x1f\x7f])?)$")
        .unwrap()
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(0|[1-9][0-9]*)$").unwrap());
static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z0-9_.-]+$").unwrap());
static NAME_LIST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\((?:[A-Za-z0-9_.-]+(?:; [A-Za-z0-9_.-]+)*)?\)$").unwrap());
static PAIR_LIST: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\((?:\([A-Za-z0-9_.-]+, [A-Za-z0-9_.-]+\)(?:; \([A-Za-z0-9_.-]+, [A-Za-z0-9_.-]+\))*)?\)$").unwrap()
});
static PAIR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(([A-Za-z0-9_.-]+), ([A-Za-z0-9_.-]+)\)").unwrap());

fn number(v: &str) -> Option<u128> {
    NUMBER.is_match(v).then(|| v.parse::<u128>().ok()).flatten()
}

fn in_range(v: &str, lo: u128, hi: u128) -> bool {
    number(v).is_some_and(|n| (lo..=hi).contains(&n))
}

fn value_ok(kind: FieldKind, v: &str, port_zero_ok: bool) -> bool {
    match kind {
        FieldKind::Status => in_range(v, 100, 599),
        FieldKind::Id => in_range(v, 1, u64::MAX as u128),
        FieldKind::Port => in_range(v, 1, 65535) || (port_zero_ok && v == "0"),
        FieldKind::Address => v.parse::<IpAddr>().is_ok_and(|a| a.to_string() == v),
        FieldKind::Token => TOKEN.is_match(v),
        FieldKind::NameList => NAME_LIST.is_match(v),
        FieldKind::PlugPairs => PAIR_LIST.is_match(v),
        FieldKind::SocketPairs => {
            PAIR_LIST.is_match(v) && PAIR.captures_iter(v).all(|c| in_range(&c[2], 1, 65535))
        }
    }
}

/// Whether `text` is a well-formed message according to the grammar.
fn oracle(text: &str) -> bool {
    let Some(body) = text.strip_suffix("\n\n") else {
        return false;
    };
    let mut lines = Vec::new();
    for l in body.split('\n') {
        let Some(c) = LINE.captures(l) else {
            return false;
        };
        lines.push((c[1].to_owned(), c[2].to_owned()));
    }
    if lines.len() < 2 || lines[0].0 != "type" || lines[1].0 != "message_id" {
        return false;
    }
    let Ok(msg_type) = lines[0].1.parse::<MessageType>() else {
        return false;
    };
    if !in_range(&lines[1].1, 1, u64::MAX as u128) {
        return false;
    }
    let mut rest = &lines[2..];
    let mut sub_type = None;
    if rest.first().is_some_and(|(k, _)| k == "sub_type") {
        let Ok(s) = rest[0].1.parse::<SubType>() else {
            return false;
        };
        sub_type = Some(s);
        rest = &rest[1..];
    }
    let Some(expected) = template(msg_type, sub_type) else {
        return false;
    };
    if rest.len() != expected.len() || rest.iter().zip(expected).any(|((k, _), f)| k != f.as_str())
    {
        return false;
    }
    let status = rest
        .iter()
        .find(|(k, _)| k == "status")
        .and_then(|(_, v)| number(v));
    let port_zero_ok = matches!(
        msg_type,
        MessageType::SessionResponse | MessageType::SessionAck
    ) && status
        .is_some_and(|s| (100..=599).contains(&s) && !(200..300).contains(&s));
    rest.iter()
        .zip(expected)
        .all(|((_, v), f)| value_ok(f.kind(), v, port_zero_ok))
}

fn value_for(kind: FieldKind) -> BoxedStrategy<String> {
    let noise = prop_oneof![
        Just(String::new()),
        Just(" x".to_owned()),
        Just("a b".to_owned()),
        Just("(".to_owned()),
        "[a-z]{1,4}",
    ];
    let valid: BoxedStrategy<String> = match kind {
        FieldKind::Status => prop_oneof![
            Just("200".to_owned()),
            Just("201".to_owned()),
            Just("404".to_owned()),
            Just("503".to_owned()),
            Just("99".to_owned()),
            Just("600".to_owned()),
            Just("0200".to_owned()),
        ]
        .boxed(),
        FieldKind::Id => prop_oneof![
            (1u64..1000).prop_map(|n| n.to_string()),
            Just("0".to_owned()),
            Just("18446744073709551615".to_owned()),
            Just("18446744073709551616".to_owned()),
            Just("01".to_owned()),
        ]
        .boxed(),
        FieldKind::Port => prop_oneof![
            (1u32..=65535).prop_map(|n| n.to_string()),
            Just("0".to_owned()),
            Just("65536".to_owned()),
            Just("080".to_owned()),
            Just("-1".to_owned()),
        ]
        .boxed(),
        FieldKind::Address => prop_oneof![
            Just("10.0.0.2".to_owned()),
            Just("fd00::a1".to_owned()),
            Just("::1".to_owned()),
            Just("fd00:0::a1".to_owned()),
            Just("10.0.0.256".to_owned()),
            Just("010.0.0.1".to_owned()),
            Just("FD00::A1".to_owned()),
        ]
        .boxed(),
        FieldKind::Token => prop_oneof![
            "[A-Za-z0-9_.-]{1,6}",
            Just("a;b".to_owned()),
            Just("x,y".to_owned())
        ]
        .boxed(),
        FieldKind::NameList => prop_oneof![
            prop::collection::vec("[A-Za-z0-9-]{1,4}", 0..4)
                .prop_map(|v| format!("({})", v.join("; "))),
            Just("(A;B)".to_owned()),
            Just("A; B".to_owned()),
            Just("(A; )".to_owned()),
        ]
        .boxed(),
        FieldKind::SocketPairs | FieldKind::PlugPairs => prop_oneof![
            prop::collection::vec(
                (
                    "[A-Za-z0-9]{1,3}",
                    prop_oneof!["[1-9][0-9]{0,4}", "[a-z]{1,3}", Just("0".to_owned())]
                ),
                0..3
            )
            .prop_map(|v| {
                let items: Vec<String> = v.iter().map(|(a, b)| format!("({a}, {b})")).collect();
                format!("({})", items.join("; "))
            }),
            Just("((S,1))".to_owned()),
            Just("((S, 1), (T, 2))".to_owned()),
        ]
        .boxed(),
    };
    prop_oneof![8 => valid, 1 => noise].boxed()
}

#[derive(Debug, Clone)]
enum Mutation {
    None,
    DropLine(usize),
    DuplicateLine(usize),
    SwapLines(usize),
    NoSpace(usize),
    DoubleSpace(usize),
    TrailingSpace(usize),
    WrongSubType,
    StripSubType,
    MissingTerminator,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        6 => Just(Mutation::None),
        1 => (0usize..16).prop_map(Mutation::DropLine),
        1 => (0usize..16).prop_map(Mutation::DuplicateLine),
        1 => (0usize..16).prop_map(Mutation::SwapLines),
        1 => (0usize..16).prop_map(Mutation::NoSpace),
        1 => (0usize..16).prop_map(Mutation::DoubleSpace),
        1 => (0usize..16).prop_map(Mutation::TrailingSpace),
        1 => Just(Mutation::WrongSubType),
        1 => Just(Mutation::StripSubType),
        1 => Just(Mutation::MissingTerminator),
    ]
}

fn candidate() -> impl Strategy<Value = String> {
    let variants = all_variants();
    (0..variants.len())
        .prop_flat_map(move |i| {
            let (t, s) = variants[i];
            let fields = template(t, s).expect("listed variant");
            let values: Vec<BoxedStrategy<String>> =
                fields.iter().map(|f| value_for(f.kind())).collect();
            (Just((t, s)), value_for(FieldKind::Id), values, mutation())
        })
        .prop_map(|((t, s), id, values, m)| {
            let mut lines: Vec<(String, String)> =
                vec![("type".into(), t.to_string()), ("message_id".into(), id)];
            if let Some(s) = s {
                lines.push(("sub_type".into(), s.to_string()));
            }
            for (f, v) in template(t, s).expect("listed variant").iter().zip(values) {
                lines.push((f.as_str().to_owned(), v));
            }
            let n = lines.len();
            let mut rendered: Vec<String> =
                lines.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            let mut terminator = "\n\n";
            match m {
                Mutation::None => {}
                Mutation::DropLine(i) => {
                    rendered.remove(i % n);
                }
                Mutation::DuplicateLine(i) => rendered.insert(i % n, rendered[i % n].clone()),
                Mutation::SwapLines(i) if n > 1 => rendered.swap(i % (n - 1), i % (n - 1) + 1),
                Mutation::SwapLines(_) => {}
                Mutation::NoSpace(i) => rendered[i % n] = rendered[i % n].replacen(": ", ":", 1),
                Mutation::DoubleSpace(i) => {
                    rendered[i % n] = rendered[i % n].replacen(": ", ":  ", 1)
                }
                Mutation::TrailingSpace(i) => rendered[i % n].push(' '),
                Mutation::WrongSubType => match s {
                    Some(_) => rendered[2] = "sub_type: agent_to_dest_service".into(),
                    None => rendered.insert(2, "sub_type: agent_to_Manager".into()),
                },
                Mutation::StripSubType => {
                    if s.is_some() {
                        rendered.remove(2);
                    }
                }
                Mutation::MissingTerminator => terminator = "\n",
            }
            format!("{}{terminator}", rendered.join("\n"))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4000))]

    #[test]
    fn parser_agrees_with_grammar(text in candidate()) {
        let parsed = parse_message(text.as_bytes());
        prop_assert_eq!(parsed.is_ok(), oracle(&text), "input:\n{}\nparser: {:?}", text, parsed);
        if let Ok(m) = parsed {
            prop_assert_eq!(serialize_message(&m).unwrap(), text.into_bytes());
        }
    }

    #[test]
    fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_message(&bytes);
    }
}

#[test]
fn oracle_accepts_every_golden_sample() {
    for m in ssmmp::wire::samples::all() {
        let text = String::from_utf8(serialize_message(&m).unwrap()).unwrap();
        assert!(oracle(&text), "{text}");
    }
}
