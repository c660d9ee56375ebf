use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use pda_core::etic::{
    alignment_loss_and_gradient, sinkhorn_scaling, Dependence, Domain, EticConfig, EticWorkspace,
    ReferenceProblem,
};
use pda_core::{par, LabelDistribution, RandomSource};

fn class(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<Domain>) {
    let mut rng = RandomSource::new(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.normal());
    let domains = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Domain::Source
            } else {
                Domain::Target
            }
        })
        .collect();
    (x, domains)
}

fn fixed_iterations(iters: usize) -> EticConfig {
    EticConfig {
        max_iters: iters,
        tol: 0.0,
        ..EticConfig::default()
    }
}

/// Fast two-column scaling against the square reference, ten iterations each.
fn fast_vs_reference(c: &mut Criterion) {
    let cfg = fixed_iterations(10);
    let mut group = c.benchmark_group("sinkhorn_10_iterations");
    group.sample_size(10);
    for n in [32, 64, 128, 256] {
        let (x, domains) = class(n, 8, n as u64);
        let ws = EticWorkspace::new(x.view(), &domains, &cfg).unwrap();
        group.bench_with_input(BenchmarkId::new("fast", n), &n, |b, _| {
            b.iter(|| sinkhorn_scaling(black_box(&ws.a), &ws.b, &ws.k1, &ws.k2, &cfg).unwrap())
        });
        let problem = ReferenceProblem::new(x.view(), &domains, &cfg).unwrap();
        group.bench_with_input(BenchmarkId::new("reference", n), &n, |b, _| {
            b.iter(|| problem.cross_scaling(black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

/// One alignment loss and gradient over many classes, on the rayon pool and
/// pinned to a single thread.
fn parallel_vs_sequential(c: &mut Criterion) {
    let k = 12;
    let n = 1200;
    let mut rng = RandomSource::new(3);
    let x = Array2::from_shape_fn((n, 16), |_| rng.normal());
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let domains: Vec<Domain> = (0..n)
        .map(|i| {
            if (i / k) % 2 == 0 {
                Domain::Source
            } else {
                Domain::Target
            }
        })
        .collect();
    let p_t = LabelDistribution::uniform(k);
    let cfg = EticConfig::default();
    let run = || {
        alignment_loss_and_gradient(x.view(), &labels, &domains, &p_t, &cfg, Dependence::Etic)
            .unwrap()
    };

    let mut group = c.benchmark_group("alignment_loss_and_gradient");
    group.sample_size(10);
    group.bench_function(
        if par::PARALLEL {
            "parallel"
        } else {
            "parallel_feature_off"
        },
        |b| b.iter(run),
    );
    group.bench_function("sequential", |b| b.iter(|| par::sequential(run)));
    group.finish();
}

criterion_group!(benches, fast_vs_reference, parallel_vs_sequential);
criterion_main!(benches);
