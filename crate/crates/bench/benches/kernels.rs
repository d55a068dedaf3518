use alchemy_core::ops::{conv2d_forward, ConvGeom};
use alchemy_core::wct::normalize_patch;
use alchemy_core::{eigh, NormNet, Tensor};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn symmetric(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

fn bench_eigh(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("eigh");
    for n in [8, 32, 64] {
        let a = symmetric(n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| eigh(black_box(a), n).unwrap()));
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = ConvGeom {
        batch: 8,
        in_channels: 16,
        height: 32,
        width: 32,
        out_channels: 32,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let x: Vec<f32> = (0..8 * 16 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..32 * 16 * 9).map(|_| rng.random_range(-0.1..0.1)).collect();
    c.bench_function("conv3x3 8x16x32x32 -> 32", |b| b.iter(|| conv2d_forward(black_box(&x), &w, None, &geom)));
}

fn bench_normalize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = NormNet::new(&[16, 32], 3).unwrap();
    let content = Tensor::from_fn(vec![3, 32, 32], |_| rng.random_range(0.0f32..1.0));
    let stain = Tensor::from_fn(vec![3, 32, 32], |_| rng.random_range(0.0f32..1.0));
    c.bench_function("normalize 32px [16,32]", |b| {
        b.iter(|| normalize_patch(&model, black_box(&content), black_box(&stain), 1.0).unwrap())
    });
}

criterion_group!(benches, bench_eigh, bench_conv, bench_normalize);
criterion_main!(benches);
