use criterion::{criterion_group, criterion_main, Criterion};
use ritual_bench::synthetic_image;
use ritual_core::transforms::{sample_params, TransformKind};
use ritual_core::{apply_transform, diffusion_distort, Rng};
use std::hint::black_box;

fn transforms(c: &mut Criterion) {
    let img = synthetic_image(336);
    let mut group = c.benchmark_group("transforms_336");
    for kind in TransformKind::ALL {
        let params = sample_params(kind, &mut Rng::new(3), img.width(), img.height());
        group.bench_function(kind.short_name(), |b| {
            b.iter(|| apply_transform(black_box(&img), &params).unwrap())
        });
    }
    group.bench_function("diffusion_500", |b| {
        let mut rng = Rng::new(4);
        b.iter(|| diffusion_distort(black_box(&img), 500, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, transforms);
criterion_main!(benches);
