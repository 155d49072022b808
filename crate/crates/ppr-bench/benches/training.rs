//! Whole-loop benchmarks: segment collection and a full training
//! update (collect, forward with losses, backward, optimizer step) at
//! the default corridor-task scale.

use criterion::{criterion_group, criterion_main, Criterion};

use ppr_core::config::ExperimentConfig;
use ppr_core::trainer::Trainer;

fn cfg() -> ExperimentConfig {
    // Defaults: full agent, H = 64, τ = 8, segment 32, batch 32.
    ExperimentConfig::default()
}

fn bench_collect(c: &mut Criterion) {
    let mut trainer = Trainer::new(&cfg()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("collect_segment_t32_b32", |b| {
        b.iter(|| trainer.collect_segment().unwrap())
    });
    group.finish();
}

fn bench_update(c: &mut Criterion) {
    let mut trainer = Trainer::new(&cfg()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("update_t32_b32", |b| {
        b.iter(|| {
            let seg = trainer.collect_segment().unwrap();
            trainer.train_step(&seg).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_collect, bench_update);
criterion_main!(benches);
