use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use skewprune::analysis::{Curvature, Direction};
use skewprune::harness::{logmel_extract, LogMelOptions};
use skewprune::nn::{one_hot, Mode};
use skewprune::{build_network, kneedle, weight_skewness, ArchSpec, Curve2D, Network, Tensor};

fn vgg_batch() -> (Network, Tensor<f32>, Tensor<f32>) {
    let spec = ArchSpec::vgg(11).with_input([1, 40, 16]).with_classes(10);
    let net = build_network(&spec, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[32, 1, 40, 16], |_| rng.random_range(-1.0f32..1.0));
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    (net, x, one_hot(&labels, 10))
}

fn network(c: &mut Criterion) {
    let (net, x, y) = vgg_batch();
    c.bench_function("vgg11_forward_eval_b32", |b| {
        b.iter(|| net.forward_eval(black_box(&x)).unwrap())
    });
    c.bench_function("vgg11_train_step_b32", |b| {
        b.iter_batched(
            || net.clone(),
            |mut n| {
                let pass = n.forward(&x, Mode::Train, true).unwrap();
                n.backward(&pass, &y, 1e-3).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

fn analysis(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gammas: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect();
    c.bench_function("weight_skewness_10k", |b| {
        b.iter(|| weight_skewness(black_box(&gammas)).unwrap())
    });

    let x: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let y: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
    let curve = Curve2D::new(x, y, Direction::Increasing, Curvature::Concave).unwrap();
    c.bench_function("kneedle_101", |b| b.iter(|| kneedle(black_box(&curve), 1.0)));
}

fn features(c: &mut Criterion) {
    let sr = 44_100;
    let audio: Vec<f32> = (0..sr).map(|i| (i as f32 * 0.05).sin()).collect();
    let opts = LogMelOptions::default();
    c.bench_function("logmel_1s_44k1", |b| {
        b.iter(|| logmel_extract(black_box(&audio), sr, &opts).unwrap())
    });
}

criterion_group!(benches, network, analysis, features);
criterion_main!(benches);
