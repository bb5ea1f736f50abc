use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ssmmp::graph::parse_graph_file;
use ssmmp::harness::run_scenario;
use ssmmp::wire::{parse_message, serialize_message};
use ssmmp_bench::{encoded_samples, fixture_scenario};

fn wire(c: &mut Criterion) {
    let samples = encoded_samples();
    c.bench_function("serialize_all_variants", |b| {
        b.iter(|| {
            for (m, _) in &samples {
                black_box(serialize_message(black_box(m)).unwrap());
            }
        })
    });
    c.bench_function("parse_all_variants", |b| {
        b.iter(|| {
            for (_, bytes) in &samples {
                black_box(parse_message(black_box(bytes)).unwrap());
            }
        })
    });
}

fn graph(c: &mut Criterion) {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/fig1.graph"
    ))
    .unwrap();
    c.bench_function("parse_fig1_graph", |b| {
        b.iter(|| black_box(parse_graph_file(black_box(&text)).unwrap()))
    });
}

fn scenarios(c: &mut Criterion) {
    let mut group = c.benchmark_group("sim");
    group.sample_size(20);
    for name in ["fig1_boot.scn", "kill_agent.scn"] {
        let scenario = fixture_scenario(name);
        group.bench_function(name, |b| {
            b.iter(|| black_box(run_scenario(scenario.clone(), 1)))
        });
    }
    group.finish();
}

criterion_group!(benches, wire, graph, scenarios);
criterion_main!(benches);
