use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reveal_bench::{scenario, SCENARIOS};
use reveal_core::run;

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("run_1000_ttis");
    g.sample_size(20);
    for (name, _) in SCENARIOS {
        let cfg = scenario(name);
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| run(cfg.clone(), false).unwrap())
        });
    }
    g.finish();

    let cfg = scenario("fullduplex_attack");
    c.bench_function("run_with_trace", |b| b.iter(|| run(cfg.clone(), true).unwrap()));
}

criterion_group!(benches, simulate);
criterion_main!(benches);
