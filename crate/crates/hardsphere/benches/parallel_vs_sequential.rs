use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use hardsphere::eos::PressureLaw;
use hardsphere::par;

/// One row of Bregman gaps against a fixed reference density.
fn gap_row(law: &PressureLaw, i: usize, n: usize) -> f64 {
    let rb = law.rho_bar();
    let r = 0.1 * rb + 0.8 * rb * i as f64 / n as f64;
    (0..n)
        .map(|j| law.relative_potential(0.01 * rb + 0.98 * rb * j as f64 / n as f64, r).unwrap_or(0.0))
        .sum()
}

fn bench(c: &mut Criterion) {
    let law = PressureLaw::power(1.0, 2.0, 3.0, 10.0).unwrap();
    let mut group = c.benchmark_group("gap_grid");
    group.sample_size(10);
    for n in [128usize, 256] {
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| black_box(par::map_range(n, |i| gap_row(&law, i, n))))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(par::map_range_seq(n, |i| gap_row(&law, i, n))))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
