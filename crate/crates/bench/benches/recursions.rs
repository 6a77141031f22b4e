use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use sgmm_core::dgp::{generate, DgpConfig};
use sgmm_core::inference::LrvAccumulator;
use sgmm_core::learning_rate::schedule;
use sgmm_core::moments::{moment_data, MomentData};
use sgmm_core::s2sls::{init_state, step_s2sls, Beta0, OnlineState};
use sgmm_core::sgmm::{step_sgmm, transition_to_efficient};

const STEPS: usize = 4096;
const SHAPES: [(usize, usize); 3] = [(1, 4), (5, 20), (10, 50)];

fn setup(p: usize, q: usize) -> (OnlineState, Vec<MomentData>) {
    let cfg = DgpConfig { seed: 17, ..DgpConfig::with_dims((2 * q + 200 + STEPS) as u64, p, q) };
    let obs: Vec<_> = generate(&cfg).unwrap().collect();
    let (init, rest) = obs.split_at(2 * q + 200);
    let state = init_state(init, 0.0, schedule(0.05, 0.501).unwrap(), Beta0::Offline2sls).unwrap();
    let md = rest.iter().map(|o| moment_data(o, cfg.dims()).unwrap()).collect();
    (state, md)
}

fn bench_s2sls(c: &mut Criterion) {
    let mut g = c.benchmark_group("step_s2sls");
    g.throughput(Throughput::Elements(STEPS as u64));
    for (p, q) in SHAPES {
        let (state, md) = setup(p, q);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{p}x{q}")), &md, |b, md| {
            b.iter_batched_ref(
                || state.clone(),
                |s| {
                    for m in md {
                        step_s2sls(s, m).unwrap();
                    }
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn bench_sgmm(c: &mut Criterion) {
    let mut g = c.benchmark_group("step_sgmm");
    g.throughput(Throughput::Elements(STEPS as u64));
    for (p, q) in SHAPES {
        let (mut state, md) = setup(p, q);
        for m in &md[..100] {
            step_s2sls(&mut state, m).unwrap();
        }
        transition_to_efficient(&mut state).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(format!("{p}x{q}")), &md, |b, md| {
            b.iter_batched_ref(
                || state.clone(),
                |s| {
                    for m in md {
                        step_sgmm(s, m).unwrap();
                    }
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn bench_lrv(c: &mut Criterion) {
    let mut g = c.benchmark_group("lrv_update");
    g.throughput(Throughput::Elements(STEPS as u64));
    for d in [1, 5, 10] {
        let path: Vec<_> = (0..STEPS).map(|i| nalgebra::DVector::from_fn(d, |k, _| ((i * 7 + k) as f64).sin())).collect();
        g.bench_with_input(BenchmarkId::from_parameter(d), &path, |b, path| {
            b.iter(|| {
                let mut acc = LrvAccumulator::new(d);
                for beta in path {
                    acc.update(beta);
                }
                black_box(acc.variance())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_s2sls, bench_sgmm, bench_lrv);
criterion_main!(benches);
