use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use irene_core::autodiff::Tensor;
use irene_core::baselines::{clip_xcorr_graphs, BaselineConfig};
use irene_core::graph::{construct_inference_graph, finalize_graph};
use irene_core::selfcheck::Toy;
use irene_core::signal::{generate_synthetic, SyntheticSpec};
use irene_core::trainer::{featurize_dataset, Pretrainer, TrainConfig};

/// Deterministic values in `[-1, 1)` without a random generator.
fn filler(len: usize, salt: usize) -> Vec<f64> {
    (0..len)
        .map(|i| ((i * 7919 + salt * 104_729) % 2000) as f64 / 1000.0 - 1.0)
        .collect()
}

fn graphs(c: &mut Criterion) {
    let n = 19;
    let a = filler(n * n, 1);
    c.bench_function("finalize_graph N=19 K=3", |b| {
        b.iter(|| finalize_graph(black_box(&a), n, 3).unwrap())
    });

    let z = Tensor::matrix(n, 32, filler(n * 32, 2)).unwrap();
    c.bench_function("ridge inference graph N=19 d=32", |b| {
        b.iter(|| construct_inference_graph(black_box(&z), 0.1, 3).unwrap())
    });
}

fn signals(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticSpec {
        clips: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    c.bench_function("featurize 8 clips", |b| {
        b.iter(|| featurize_dataset(black_box(&data)).unwrap())
    });
    let cfg = BaselineConfig::default();
    c.bench_function("cross-correlation graphs, one clip", |b| {
        b.iter(|| clip_xcorr_graphs(black_box(&data.clips[0]), data.window_seconds, &cfg).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let toy = Toy::new(0).unwrap();
    let mut tr = Pretrainer::new(
        toy.model,
        TrainConfig::default(),
        toy.features,
        Some(toy.labels),
    )
    .unwrap();
    c.bench_function("pretrain step, toy batch of 2", |b| {
        b.iter(|| tr.step(black_box(&[0, 1])).unwrap())
    });
}

criterion_group!(benches, graphs, signals, training);
criterion_main!(benches);
