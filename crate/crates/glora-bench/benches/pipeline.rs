use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use glora_bench::fixture;
use glora_core::evolution::{evolve, EvoSettings};
use glora_core::supernet::{train_supernet, TrainSchedule};

/// The inference story in numbers: the adapter path pays for support-tensor
/// materialization on every call, the merged path is a plain affine stack.
fn bench_forward(c: &mut Criterion) {
    let fx = fixture();
    let merged = fx.model.merge(&fx.config).unwrap();

    let mut group = c.benchmark_group("forward_64_samples");
    group.bench_function("base", |b| {
        b.iter(|| fx.model.forward_eval(None, black_box(&fx.input)).unwrap())
    });
    group.bench_function("adapter", |b| {
        b.iter(|| {
            fx.model
                .forward_eval(Some(&fx.config), black_box(&fx.input))
                .unwrap()
        })
    });
    group.bench_function("merged", |b| {
        b.iter(|| merged.forward_eval(black_box(&fx.input)).unwrap())
    });
    group.finish();
}

fn bench_merge(c: &mut Criterion) {
    let fx = fixture();
    c.bench_function("reparameterize_model", |b| {
        b.iter(|| fx.model.merge(black_box(&fx.config)).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let fx = fixture();
    let schedule = TrainSchedule {
        epochs: 1,
        batch_size: 64,
        peak_lr: 1e-3,
        weight_decay: 0.01,
        seed: 3,
    };
    c.bench_function("supernet_epoch_640_samples", |b| {
        b.iter_batched(
            || fx.model.clone(),
            |mut model| train_supernet(&mut model, &fx.spaces, &fx.data, &schedule).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_search_generation(c: &mut Criterion) {
    let fx = fixture();
    let settings = EvoSettings {
        generations: 1,
        seed: 4,
        ..EvoSettings::default()
    };
    c.bench_function("evolve_one_generation", |b| {
        b.iter(|| evolve(&fx.model, &fx.spaces, &fx.data, black_box(&settings)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_merge,
    bench_train_epoch,
    bench_search_generation
);
criterion_main!(benches);
