//! Sequential versus data-parallel execution of the batch hot paths.
//!
//! Without the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qfsep::calib::{build_quantized_graph, collect_stats};
use qfsep::data::{generate, GenSpec};
use qfsep::float_engine::evaluate;
use qfsep::int8::{evaluate_quantized, RequantMode};
use qfsep::model::{build_friendly_mini, ArchSpec};
use qfsep::train::init_weights;
use qfsep::transforms::fold_batchnorm;
use qfsep::Exec;

fn engines(c: &mut Criterion) {
    let (train, val, _) = generate(&GenSpec {
        train: 64,
        val: 128,
        holdout: 1,
        ..GenSpec::default()
    })
    .unwrap();
    let g = init_weights(&build_friendly_mini(&ArchSpec::default()).unwrap(), 1).unwrap();
    let (folded, _) = fold_batchnorm(&g).unwrap();
    let calib = train.per_class(4).unwrap();
    let qg = build_quantized_graph(
        &folded,
        &collect_stats(&folded, &calib, Exec::Sequential).unwrap(),
    )
    .unwrap();

    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::new("float-eval", name), &exec, |b, &e| {
            b.iter(|| evaluate(&folded, &val, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("int8-eval", name), &exec, |b, &e| {
            b.iter(|| evaluate_quantized(&qg, &val, RequantMode::FixedMultiplier, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("calibrate", name), &exec, |b, &e| {
            b.iter(|| collect_stats(&folded, &calib, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, engines);
criterion_main!(benches);
