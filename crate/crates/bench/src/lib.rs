//! Inputs shared by the benchmarks.

use std::path::Path;

use ssmmp::harness::{load_scenario, Scenario};
use ssmmp::wire::{samples, serialize_message, Message};

/// Every message variant, serialized.
pub fn encoded_samples() -> Vec<(Message, Vec<u8>)> {
    samples::all()
        .into_iter()
        .map(|m| {
            let bytes = serialize_message(&m).expect("samples are valid");
            (m, bytes)
        })
        .collect()
}

/// A scenario from the workspace fixtures directory.
pub fn fixture_scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    load_scenario(&path).expect("fixture loads")
}
