use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use taloc_bench::{config, qkv};
use taloc_core::taa;

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    let cfg = config(5);
    for t in [128usize, 256, 512] {
        let (q, k, v) = qkv(t, &cfg, 1);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("windowed", t), &t, |b, _| {
            b.iter(|| taa::gpa_forward(&q, &k, &v, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dense", t), &t, |b, _| {
            b.iter(|| taa::dense_attention(&q, &k, &v, &cfg).unwrap())
        });
    }
    group.finish();
}

fn shift(c: &mut Criterion) {
    let cfg = config(5);
    let (_, _, v) = qkv(512, &cfg, 2);
    c.bench_function("lcs/512", |b| {
        b.iter(|| taa::lcs(&v, cfg.head_dim(), cfg.shift_size, cfg.shift_mode))
    });
}

criterion_group!(benches, attention, shift);
criterion_main!(benches);
