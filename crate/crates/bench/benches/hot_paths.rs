use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rd_bench::{chart_table, long_rationale, tall_sizes, QUESTION};
use rd_core::codec::{encode_program_rationale, encode_target, WhitespaceCounter};
use rd_core::crop::{plan_crops, CropMode};
use rd_core::dsl;
use rd_core::eval::{anls, ANLS_TAU};

fn crops(c: &mut Criterion) {
    let sizes = tall_sizes(1000);
    c.bench_function("plan_crops/1000 tall images", |b| {
        b.iter(|| {
            for &(h, w) in &sizes {
                black_box(plan_crops(h, w, CropMode::Verbatim).unwrap());
            }
        })
    });
}

fn programs(c: &mut Criterion) {
    let src = "Avg(12.5, 40, 37.25, 1200, 3, 8, 91)";
    c.bench_function("dsl/parse", |b| b.iter(|| dsl::parse(black_box(src)).unwrap()));
    let program = dsl::parse(src).unwrap();
    c.bench_function("dsl/execute", |b| b.iter(|| dsl::execute(black_box(&program)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let golds = vec!["Instagram".to_string(), "instagram app".to_string()];
    c.bench_function("anls/short", |b| b.iter(|| anls(black_box("Instagrm"), &golds, ANLS_TAU)));
}

fn codec(c: &mut Criterion) {
    let counter = WhitespaceCounter;
    let rationale = long_rationale(400);
    c.bench_function("encode_target/truncating", |b| {
        b.iter(|| encode_target(black_box(QUESTION), Some(&rationale), "Instagram", &counter).unwrap())
    });
    let table = chart_table(30);
    c.bench_function("encode_program_rationale/30 rows", |b| {
        b.iter(|| encode_program_rationale(black_box(&table), "Diff(310, 303)", &counter))
    });
}

criterion_group!(benches, crops, programs, metrics, codec);
criterion_main!(benches);
