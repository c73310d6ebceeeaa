use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ritual_bench::random_distribution;
use ritual_core::decoding::{fuse_combined, fuse_m3id, fuse_ritual, fuse_vcd, plausibility_mask, sample, Sampler};
use ritual_core::Rng;
use std::hint::black_box;

// 32000 is a LLaVA-sized vocabulary.
const VOCABS: [usize; 2] = [1_000, 32_000];

fn fusion(c: &mut Criterion) {
    let mut group = c.benchmark_group("fusion");
    for vocab in VOCABS {
        let mut rng = Rng::new(1);
        let p = random_distribution(vocab, &mut rng);
        let q = random_distribution(vocab, &mut rng);
        let mask = plausibility_mask(&p, 0.1);
        group.bench_with_input(BenchmarkId::new("mask", vocab), &p, |b, p| {
            b.iter(|| plausibility_mask(black_box(p), 0.1))
        });
        group.bench_with_input(BenchmarkId::new("ritual", vocab), &(), |b, _| {
            b.iter(|| fuse_ritual(black_box(&p), black_box(&q), 3.0, &mask).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("vcd", vocab), &(), |b, _| {
            b.iter(|| fuse_vcd(black_box(&p), black_box(&q), 2.0, 1.0, &mask).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("m3id", vocab), &(), |b, _| {
            b.iter(|| fuse_m3id(black_box(&p), black_box(&q), 0.1, 5, &mask).unwrap())
        });
        let fused = fuse_vcd(&p, &q, 1.0, 0.1, &mask).unwrap();
        group.bench_with_input(BenchmarkId::new("ritual_vcd", vocab), &(), |b, _| {
            b.iter(|| fuse_combined(black_box(&q), black_box(&fused), 3.0, &mask).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sample", vocab), &fused, |b, d| {
            let mut rng = Rng::new(2);
            b.iter(|| sample(black_box(d), Sampler::Multinomial, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, fusion);
criterion_main!(benches);
