use coalmtl::coalescent::{greedy_rate1, posterior_marginals, sample_coalescent, GaussianMessage};
use coalmtl::da::{da_fit, DaConfig, DaVariant};
use coalmtl::diffusion::{sample_da_instance, DaInstanceConfig};
use coalmtl::learners::{map_weights, WeightPrior};
use coalmtl::{Covariance, DiffusionKernel, TaskKind};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaves(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<GaussianMessage> {
    (0..k)
        .map(|_| {
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            GaussianMessage::new(mean, Covariance::scaled_identity(d, 0.1)).unwrap()
        })
        .collect()
}

fn bench_bp(c: &mut Criterion) {
    let mut g = c.benchmark_group("posterior_marginals");
    for &k in &[8usize, 32, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = sample_coalescent(k, &mut rng).unwrap();
        let msgs = leaves(k, 10, &mut rng);
        let kernel = DiffusionKernel::isotropic(10, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| posterior_marginals(&tree, &msgs, &kernel, None).unwrap())
        });
    }
    g.finish();
}

fn bench_greedy(c: &mut Criterion) {
    let mut g = c.benchmark_group("greedy_rate1");
    g.sample_size(10);
    for &k in &[8usize, 32] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let msgs = leaves(k, 10, &mut rng);
        let kernel = DiffusionKernel::isotropic(10, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| b.iter(|| greedy_rate1(&msgs, &kernel).unwrap()));
    }
    g.finish();
}

fn bench_map(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = sample_da_instance(&DaInstanceConfig::new(2, 50, 500, TaskKind::Classification), &mut rng).unwrap();
    let prior = WeightPrior::isotropic(50, 1.0).unwrap();
    c.bench_function("map_weights/logistic_d50_n500", |b| b.iter(|| map_weights(&inst.tasks[0], &prior, 1.0).unwrap()));
}

fn bench_da_fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("da_fit");
    g.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = sample_da_instance(&DaInstanceConfig::new(4, 10, 100, TaskKind::Classification), &mut rng).unwrap();
    for v in [DaVariant::Diag, DaVariant::Full] {
        let cfg = DaConfig { variant: v, max_iters: 5, ..DaConfig::default() };
        g.bench_function(v.to_string(), |b| b.iter(|| da_fit(&inst.tasks, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_bp, bench_greedy, bench_map, bench_da_fit);
criterion_main!(benches);
