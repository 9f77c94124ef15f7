use criterion::{black_box, criterion_group, criterion_main, Criterion};
use powq_core::optim::{
    dsq, dsq_grad, exponent_backward, optimize_layer_nupes, BetaSchedule, Mode, OptConfig,
};
use powq_core::quant::QuantConfig;
use powq_core::tensor::{Granularity, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn gaussian2(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
    )
    .unwrap()
}

fn bench_dsq(c: &mut Criterion) {
    let eps: Vec<f64> = (0..4096).map(|i| (i as f64) * 0.013 - 25.0).collect();
    c.bench_function("dsq_4096", |b| {
        b.iter(|| {
            let mut acc = 0.0f64;
            for &e in black_box(&eps) {
                acc += dsq(e, 20.0);
            }
            acc
        })
    });
    c.bench_function("dsq_grad_4096", |b| {
        b.iter(|| {
            let mut acc = 0.0f64;
            for &e in black_box(&eps) {
                acc += dsq_grad(e, 20.0);
            }
            acc
        })
    });
}

fn bench_exponent_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..32 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let gx: Vec<f64> = (0..32 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..64 * 32).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let gw: Vec<f64> = (0..64 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("exponent_backward_32x64_64x32", |b| {
        b.iter(|| {
            exponent_backward(
                black_box(&x),
                32,
                black_box(&gx),
                black_box(&w),
                64,
                black_box(&gw),
                0.5,
                1e-6,
            )
            .unwrap()
        })
    });
}

fn bench_layer_optimization(c: &mut Criterion) {
    let w = gaussian2(32, 16, 7);
    let x = gaussian2(256, 32, 8);
    let wcfg = QuantConfig::new(4, 0.5, Granularity::PerTensor).unwrap();
    let cfg = OptConfig {
        steps: 100,
        batch_size: 32,
        mode: Mode::LearnWAndA,
        dsq_schedule: BetaSchedule::Const(20.0),
        ..OptConfig::default()
    };
    let mut group = c.benchmark_group("layer_optimization");
    group.sample_size(10);
    group.bench_function("nupes_100_steps_32x16", |b| {
        b.iter(|| optimize_layer_nupes(&w, &x, &x, &wcfg, 4, &cfg, 1).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_dsq,
    bench_exponent_backward,
    bench_layer_optimization
);
criterion_main!(benches);
