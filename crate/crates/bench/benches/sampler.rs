use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use damm_bench::{damm_model, s_curve};
use damm_ds::sampler::{advance, initial_state, run};
use damm_ds::SamplerConfig;

fn sampler_iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampler_iteration");
    for samples in [100, 500, 2000] {
        let demo = s_curve(samples);
        let model = damm_model(&demo);
        let config = SamplerConfig::default();
        let warm = run(&model, &SamplerConfig { iterations: 20, ..config.clone() }).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(demo.len()), &warm, |b, state| {
            b.iter(|| advance(&model, state.clone(), &config).unwrap())
        });
    }
    group.finish();
}

fn sampler_start(c: &mut Criterion) {
    let demo = s_curve(500);
    let model = damm_model(&demo);
    let config = SamplerConfig::default();
    c.bench_function("initial_state_1500", |b| {
        b.iter(|| initial_state(&model, vec![0; 1500], &config).unwrap())
    });
}

criterion_group!(benches, sampler_iteration, sampler_start);
criterion_main!(benches);
