//! Decoder-variant comparison: incremental decode throughput and full
//! training steps. Run with `cargo bench -p deepscale-bench`.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use deepscale::infer;
use deepscale::train;
use deepscale_bench::{model, source_batch, step_config, VARIANTS};

fn decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("greedy_decode_6l");
    group
        .sample_size(10)
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(3));
    let src = source_batch(4, 24);
    for decoder in VARIANTS {
        let m = model(decoder, 6);
        group.bench_function(decoder.name(), |b| {
            b.iter(|| infer::greedy_decode(&m, &src, false).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_6l");
    group
        .sample_size(10)
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(3));
    let cfg = step_config();
    for decoder in VARIANTS {
        let m = model(decoder, 6);
        group.bench_function(decoder.name(), |b| {
            b.iter_batched(
                || m.clone(),
                |mut m| train::train(&mut m, &cfg, None).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, decode, train_step);
criterion_main!(benches);
