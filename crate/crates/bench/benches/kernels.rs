use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsno_bench::{default_grid, default_model, noise_batch};
use dsno_core::dsno::{forward_batch, forward_traced};
use dsno_core::nnops::{dft_truncated, FeatureGrid};
use dsno_core::trajectories::solve_trajectory;
use dsno_core::{GaussianMixture, NoiseSchedule, Solver};

fn forward(c: &mut Criterion) {
    let params = default_model(0);
    let grid = default_grid();
    let mut group = c.benchmark_group("forward_batch");
    for n in [1usize, 256] {
        let xs = noise_batch(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &xs, |b, xs| {
            b.iter(|| forward_batch(&params, black_box(xs), &grid).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let params = default_model(0);
    let grid = default_grid();
    let x = FeatureGrid::from_vec(256, 1, 2, noise_batch(256)).unwrap();
    let grad = FeatureGrid::from_vec(256, 4, 2, vec![1e-3; 256 * 8]).unwrap();
    c.bench_function("forward_backward_256", |b| {
        b.iter(|| {
            let trace = forward_traced(&params, &x, grid.times()).unwrap();
            let mut g = params.zeros_like();
            dsno_core::dsno::backward(&params, &trace, &grad, &mut g).unwrap();
            g
        })
    });
}

fn dft(c: &mut Criterion) {
    let u = FeatureGrid::from_vec(256, 8, 64, (0..256 * 8 * 64).map(|i| (i as f64).sin()).collect()).unwrap();
    c.bench_function("dft_truncated_256x8x64", |b| b.iter(|| dft_truncated(black_box(&u), 5).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let gm = GaussianMixture::default_bimodal();
    let sched = NoiseSchedule::default();
    let grid = default_grid();
    c.bench_function("score_bimodal", |b| {
        b.iter(|| gm.score(&sched, black_box(&[0.3, -0.7]), 0.4).unwrap())
    });
    c.bench_function("solve_trajectory_heun_64", |b| {
        b.iter(|| solve_trajectory(&gm, &sched, black_box(&[0.3, -0.7]), &grid, Solver::Heun, 64).unwrap())
    });
}

criterion_group!(benches, forward, backward, dft, oracle);
criterion_main!(benches);
