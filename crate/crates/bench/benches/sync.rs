use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use reveal_core::sync::{build_observation_matrix, numeric_rank, ExchangeSession, PathDelays};
use reveal_core::{ClockParams, SyncEstimate};

fn sync(c: &mut Criterion) {
    let clock = ClockParams::new(1.002443, 4.0).unwrap();
    let mut g = c.benchmark_group("estimate");
    for n in [32usize, 1_000, 10_000] {
        let recs = ExchangeSession::new(clock, PathDelays::symmetric(500), n).synthesize();
        g.bench_with_input(BenchmarkId::from_parameter(n), &recs, |b, r| {
            b.iter(|| SyncEstimate::from_records(black_box(r)).unwrap())
        });
    }
    g.finish();

    let recs = ExchangeSession::new(clock, PathDelays::symmetric(500), 4).synthesize();
    c.bench_function("rank_4x4", |b| {
        b.iter(|| numeric_rank(&build_observation_matrix(black_box(&recs)).unwrap().rows, 1e-9))
    });
}

criterion_group!(benches, sync);
criterion_main!(benches);
