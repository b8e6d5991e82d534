use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use seot_bench::{planted_graph, transport_instance};
use seot_core::ot::sinkhorn;
use seot_core::spectral::{laplacian, smallest_eigenpairs, SolverParams};
use seot_core::{IsolatedPolicy, SinkhornConfig};

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    group.sample_size(10);
    for n in [100, 200, 400] {
        let (mu, nu, cost) = transport_instance(n, 1);
        for eps in [1e-1, 1e-2] {
            let cfg = SinkhornConfig { epsilon: eps, ..Default::default() };
            group.bench_with_input(BenchmarkId::new(format!("eps={eps}"), n), &cfg, |b, cfg| {
                b.iter(|| sinkhorn(&mu, &nu, &cost, cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_matvec(c: &mut Criterion) {
    let mut group = c.benchmark_group("normalized_adjacency_matvec");
    for degree in [8, 16, 32] {
        let graph = planted_graph(5000, degree, 3);
        let op = laplacian(&graph, IsolatedPolicy::SelfLoop);
        let x = Array2::from_elem((op.dim(), 4), 1.0);
        let mut y = Array2::zeros((op.dim(), 4));
        group.bench_function(BenchmarkId::new("K=5000,cols=4", degree), |b| {
            b.iter(|| op.apply_normalized_adjacency(x.view(), &mut y))
        });
    }
    group.finish();
}

fn bench_eigensolver(c: &mut Criterion) {
    let mut group = c.benchmark_group("smallest_eigenpairs");
    group.sample_size(10);
    for k in [1000, 5000] {
        let graph = planted_graph(k, 16, 5);
        let op = laplacian(&graph, IsolatedPolicy::SelfLoop);
        group.bench_function(BenchmarkId::new("m=3", k), |b| {
            b.iter(|| smallest_eigenpairs(&op, 3, &SolverParams::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sinkhorn, bench_matvec, bench_eigensolver);
criterion_main!(benches);
