use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use damm_ds::eval::dtwd;
use nalgebra::DMatrix;

fn dtw(c: &mut Criterion) {
    let mut group = c.benchmark_group("dtwd");
    for n in [100, 500, 1000] {
        let a = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 1)) as f64 * 0.01).sin());
        let b = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 2)) as f64 * 0.013).cos());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| dtwd(&a, &b).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, dtw);
criterion_main!(benches);
