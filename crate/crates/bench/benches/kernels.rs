use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icebench::metrics::confusion;
use icebench::model::pixel_features;
use icebench::preprocess::{downscale, Pool};
use icebench::sampling::{extract_patches, SamplingConfig};
use icebench_bench::{label_pairs, ramp, synthetic_inputs};

fn bench_extract(c: &mut Criterion) {
    let inputs = synthetic_inputs(1, 400);
    let mut group = c.benchmark_group("extract_patches");
    for (size, stride) in [(32, 16), (64, 32)] {
        let cfg = SamplingConfig {
            patch_size: Some(size),
            stride,
            ..SamplingConfig::default()
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{size}/{stride}")),
            &cfg,
            |b, cfg| b.iter(|| extract_patches(black_box(&inputs[0]), cfg)),
        );
    }
    group.finish();
}

fn bench_downscale(c: &mut Criterion) {
    let r = ramp(1024, 1024);
    let mut group = c.benchmark_group("downscale");
    for ratio in [2, 5, 10] {
        group.bench_with_input(BenchmarkId::new("average", ratio), &ratio, |b, &ratio| {
            b.iter(|| downscale(black_box(&r), ratio, Pool::Average).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("max", ratio), &ratio, |b, &ratio| {
            b.iter(|| downscale(black_box(&r), ratio, Pool::Max).unwrap())
        });
    }
    group.finish();
}

fn bench_confusion(c: &mut Criterion) {
    let (t, p) = label_pairs(1 << 20);
    c.bench_function("confusion/1M", |b| {
        b.iter(|| {
            confusion(black_box(&t), black_box(&p))
                .unwrap()
                .report()
                .unwrap()
        })
    });
}

fn bench_pixel_features(c: &mut Criterion) {
    let inputs = synthetic_inputs(1, 256);
    c.bench_function("pixel_features/256", |b| {
        b.iter(|| pixel_features(black_box(&inputs[0].features)))
    });
}

criterion_group!(
    benches,
    bench_extract,
    bench_downscale,
    bench_confusion,
    bench_pixel_features
);
criterion_main!(benches);
