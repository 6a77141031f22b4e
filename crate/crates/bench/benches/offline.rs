use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use sgmm_core::baselines::offline_pair;
use sgmm_core::dgp::{generate, DgpConfig};

fn bench_dgp(c: &mut Criterion) {
    let mut g = c.benchmark_group("dgp_generate");
    let n = 10_000u64;
    g.throughput(Throughput::Elements(n));
    for (p, q) in [(5, 20), (10, 50)] {
        let cfg = DgpConfig { seed: 3, ..DgpConfig::with_dims(n, p, q) };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{p}x{q}")), &cfg, |b, cfg| {
            b.iter(|| black_box(generate(cfg).unwrap().fold(0.0, |acc, o| acc + o.y)))
        });
    }
    g.finish();
}

fn bench_offline(c: &mut Criterion) {
    let mut g = c.benchmark_group("offline_2sls_gmm");
    g.sample_size(20);
    for n in [10_000usize, 100_000] {
        let cfg = DgpConfig { seed: 4, ..DgpConfig::with_dims(n as u64, 5, 20) };
        let obs: Vec<_> = generate(&cfg).unwrap().collect();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &obs, |b, obs| b.iter(|| black_box(offline_pair(obs).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, bench_dgp, bench_offline);
criterion_main!(benches);
