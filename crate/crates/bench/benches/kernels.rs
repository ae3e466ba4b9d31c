use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dualenkf_core::dual_enkf::{noise_covariance, step_backward};
use dualenkf_core::gauss_approx::{interaction_ga, GaContext};
use dualenkf_core::models::{make_smd_model, SmdParams};
use dualenkf_core::riccati::integrate_dre;
use dualenkf_core::rng::ParticleStreams;
use dualenkf_core::{Ensemble, Objective};

fn ensemble(n: usize, seed: u64) -> Ensemble {
    let particles = ParticleStreams::new(seed, n).standard_normals(2);
    Ensemble::new(particles, 1.0).unwrap()
}

fn bench_step_backward(c: &mut Criterion) {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let obj = Objective::rsc(0.5).unwrap();
    let noise = noise_covariance(&obj, &cost).unwrap();
    let mut group = c.benchmark_group("step_backward");
    for n in [100, 1000, 10_000] {
        let ens = ensemble(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let mut streams = ParticleStreams::new(2, n);
            b.iter(|| step_backward(&ens, 1e-2, &lti, &cost, &obj, &noise, &mut streams).unwrap());
        });
    }
    group.finish();
}

fn bench_integrate_dre(c: &mut Criterion) {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    c.bench_function("integrate_dre/smd_T5_dt1e-3", |b| {
        b.iter(|| integrate_dre(&Objective::Soc, &lti, &cost, 5.0, 1e-3).unwrap());
    });
}

fn bench_interaction_ga(c: &mut Criterion) {
    let (_, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let obj = Objective::Soc;
    let mut group = c.benchmark_group("interaction_ga");
    for n in [100, 1000, 10_000] {
        let ens = ensemble(n, 3);
        let ctx = GaContext::new(&ens, &cost);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| interaction_ga(&ens, &ctx, &obj).unwrap());
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_step_backward,
    bench_integrate_dre,
    bench_interaction_ga
);
criterion_main!(benches);
