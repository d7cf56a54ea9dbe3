use criterion::{criterion_group, criterion_main, Criterion};
use damm_bench::s_curve;
use damm_ds::lpvds::{rollout, RolloutConfig};
use damm_ds::pipeline::learn;
use damm_ds::{LearnConfig, SamplerConfig};

fn fit_and_rollout(c: &mut Criterion) {
    let demo = s_curve(170);
    let config = LearnConfig {
        sampler: SamplerConfig { iterations: 50, ..SamplerConfig::default() },
        ..LearnConfig::default()
    };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("learn_510", |b| b.iter(|| learn(&demo, &config).unwrap()));
    group.finish();

    let learned = learn(&demo, &config).unwrap();
    let start = demo.position(0);
    let rc = RolloutConfig::new(0.01, 10_000, 1e-3);
    c.bench_function("rollout_rk4", |b| b.iter(|| rollout(&learned.lpvds, &start, &rc).unwrap()));
}

criterion_group!(benches, fit_and_rollout);
criterion_main!(benches);
