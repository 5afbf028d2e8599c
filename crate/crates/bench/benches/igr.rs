use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use igr_bench::{reduced, sample_moments};
use igr_core::lab::{all_invariant_sets, separation_diagnostics, EnumerateOptions};
use igr_core::{weight_table, PenalizedProblem, SolverOptions};

fn weights(c: &mut Criterion) {
    let mut group = c.benchmark_group("weights");
    for (d, k) in [(10, 1), (10, 2), (20, 2), (12, 3)] {
        let m = sample_moments(d, 500, 1);
        group.bench_with_input(BenchmarkId::new(format!("d{d}"), k), &k, |b, &k| {
            b.iter(|| weight_table(black_box(&m), k).unwrap())
        });
    }
    group.finish();
}

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("solver");
    let opts = SolverOptions::default();
    for d in [10, 30] {
        let m = sample_moments(d, 1000, 2);
        let w = weight_table(&m, 1).unwrap();
        let p = PenalizedProblem::new(&m, &w).unwrap();
        group.bench_function(BenchmarkId::new("solve", d), |b| b.iter(|| p.solve(black_box(1.0), 0.01, &opts).unwrap()));
        let gammas: Vec<f64> = (0..=40).map(|i| 0.1 * i as f64).collect();
        group.bench_function(BenchmarkId::new("path", d), |b| b.iter(|| p.path(&gammas, 0.0, &opts).unwrap()));
    }
    group.finish();
}

fn lab(c: &mut Criterion) {
    let mut group = c.benchmark_group("lab");
    group.sample_size(10);
    let opts = EnumerateOptions::default();
    for k in [2, 3] {
        let inst = reduced(k, 7);
        group.bench_function(BenchmarkId::new("enumerate", inst.d()), |b| {
            b.iter(|| all_invariant_sets(inst.moments(), &opts).unwrap())
        });
    }
    for k in [1, 2] {
        let inst = reduced(k, 7);
        group.bench_function(BenchmarkId::new("separation", inst.d()), |b| {
            b.iter(|| separation_diagnostics(&inst, 24).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, weights, solver, lab);
criterion_main!(benches);
