use std::collections::BTreeSet;
use std::hint::black_box;

use annomap_core::corpus::{preprocess, sample_enrollment, EnrollmentSize, PreprocessOptions};
use annomap_core::mapper::{map_similar, HeadOutputs, SelectionMode};
use annomap_core::metrics::ccc;
use annomap_core::net::{aggregate_items, train_aggregate_epochs, ModelConfig, ModelParams, TrainConfig};
use annomap_core::sim::{gen_benchmark, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_ccc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("ccc");
    for n in [100usize, 10_000] {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.8 * v + rng.random_range(-0.2..0.2)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| ccc(black_box(&x), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn small_sim() -> SimConfig {
    SimConfig {
        n_samples: 600,
        n_target_samples: 400,
        n_source_annotators: 20,
        n_target_annotators: 20,
        ..SimConfig::default()
    }
}

fn bench_training_epoch(c: &mut Criterion) {
    let sim = small_sim();
    let bench = gen_benchmark(&sim).unwrap();
    let source = preprocess(&bench.source, &PreprocessOptions::default()).unwrap();
    let model = ModelParams::init(
        ModelConfig {
            feature_dim: source.feature_dim,
            hidden_width: 32,
            dropout_rate: 0.2,
            annotator_ids: source.annotator_ids(),
        },
        0,
    )
    .unwrap();
    let items = aggregate_items(&source, None);
    let cfg = TrainConfig::default();
    c.bench_function("aggregate_epoch_600_samples", |b| {
        b.iter(|| train_aggregate_epochs(&model, &items, &cfg, 1).unwrap())
    });
}

fn bench_mapping(c: &mut Criterion) {
    let sim = small_sim();
    let bench = gen_benchmark(&sim).unwrap();
    let source = preprocess(&bench.source, &PreprocessOptions::default()).unwrap();
    let target = preprocess(&bench.target, &PreprocessOptions::default()).unwrap();
    let model = ModelParams::init(
        ModelConfig {
            feature_dim: source.feature_dim,
            hidden_width: 32,
            dropout_rate: 0.2,
            annotator_ids: source.annotator_ids(),
        },
        0,
    )
    .unwrap();
    let train: BTreeSet<String> = target.train_sample_ids();
    let enrollments: Vec<_> = target
        .annotator_ids()
        .iter()
        .map(|t| sample_enrollment(&target, &train, t, EnrollmentSize::Count(30), 0).unwrap())
        .collect();
    c.bench_function("head_outputs_400_samples", |b| {
        b.iter(|| HeadOutputs::for_dataset(&model, &target).unwrap())
    });
    let outputs = HeadOutputs::for_dataset(&model, &target).unwrap();
    c.bench_function("map_similar_20x20_n30", |b| {
        b.iter(|| map_similar(&model, &outputs, black_box(&enrollments), SelectionMode::PerDimension))
    });
}

criterion_group!(benches, bench_ccc, bench_training_epoch, bench_mapping);
criterion_main!(benches);
