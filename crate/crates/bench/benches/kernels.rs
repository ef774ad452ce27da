use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use mobiflow_core::battery::{neumann_projected, CosineSeries};
use mobiflow_core::evi::smooth_bump;
use mobiflow_core::kernels::{semigroup_step, weighted_elliptic_solve, SemigroupParams};
use mobiflow_core::transport::{wm_distance, TransportSolveOptions};
use mobiflow_core::{DomainGrid, Mobility, Shape};

fn grid(shape: Shape, n: usize) -> Arc<DomainGrid> {
    Arc::new(DomainGrid::build(shape, n).unwrap())
}

fn bench_grid(c: &mut Criterion) {
    c.bench_function("grid_build_pacman_128", |b| b.iter(|| DomainGrid::build(black_box(Shape::Pacman), 128).unwrap()));
}

fn bench_elliptic(c: &mut Criterion) {
    let g = grid(Shape::Pacman, 64);
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let rho = smooth_bump(&g, [0.4, 0.5], 0.15, 0.3).unwrap();
    let series = CosineSeries { terms: vec![(1, 0, 1.0), (1, 1, 0.5)], offset: 0.0 };
    let rhs = neumann_projected(&g, &series).unwrap().zero_mean();
    c.bench_function("elliptic_pacman_64", |b| {
        b.iter(|| weighted_elliptic_solve(black_box(&rho), &rhs, &reg, 1e-10).unwrap())
    });
}

fn bench_semigroup(c: &mut Criterion) {
    let g = grid(Shape::Square, 64);
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let rho = smooth_bump(&g, [0.4, 0.5], 0.15, 0.3).unwrap();
    let series = CosineSeries { terms: vec![(1, 0, 0.3), (0, 1, -0.2)], offset: 0.0 };
    let phi = neumann_projected(&g, &series).unwrap();
    let params = SemigroupParams { delta: 0.5, phi, reg, dt: 1e-4, substeps: None };
    c.bench_function("semigroup_square_64_t1e-3", |b| {
        b.iter(|| semigroup_step(black_box(&rho), &params, 1e-3).unwrap())
    });
}

fn bench_distance(c: &mut Criterion) {
    let g = grid(Shape::Disc { radius: 0.4 }, 16);
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let a = smooth_bump(&g, [0.4, 0.5], 0.15, 0.3).unwrap();
    let b = smooth_bump(&g, [0.6, 0.5], 0.15, 0.3).unwrap();
    let opts = TransportSolveOptions { n_time: 8, ..Default::default() };
    let mut group = c.benchmark_group("transport");
    group.sample_size(10);
    group.bench_function("wm_distance_disc_16", |bch| {
        bch.iter(|| wm_distance(black_box(&a), &b, &reg, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_grid, bench_elliptic, bench_semigroup, bench_distance);
criterion_main!(benches);
