use criterion::{criterion_group, criterion_main, Criterion};

use factorboost::baseline::flat_attr;
use factorboost::synth::{star_features, star_target};
use factorboost::tree::get_best_split;
use factorboost::{TrainInput, TreeParams};
use factorboost_bench::split_fixture;

fn split_search(c: &mut Criterion) {
    let (db, flat) = split_fixture(200_000, 10_000).expect("fixture");
    let flat_db = flat.database().expect("flat database");
    let params = TreeParams::default();
    let factorized = TrainInput::regression(&db, &star_target(), star_features()).expect("input");
    let materialized = TrainInput::regression(
        &flat_db,
        &flat_attr(&star_target()),
        star_features().iter().map(flat_attr).collect(),
    )
    .expect("input");

    let mut group = c.benchmark_group("split_search");
    group.sample_size(10);
    group.bench_function("factorized", |b| b.iter(|| get_best_split(&factorized, &[], &params).expect("split")));
    group.bench_function("materialized", |b| b.iter(|| get_best_split(&materialized, &[], &params).expect("split")));
    group.finish();
}

criterion_group!(benches, split_search);
criterion_main!(benches);
