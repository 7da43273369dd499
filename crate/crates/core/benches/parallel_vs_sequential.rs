//! Default rayon pool against a single worker. Build with
//! `--no-default-features` for the fully sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use m2m::mrn::{Mrn, MrnConfig};
use m2m::ops::conv2d_raw;
use m2m::par::with_threads;
use m2m::pipeline::{interpolate, FlowSource, InterpolationRequest};
use m2m::warp::{splat_sums, FlowField};
use m2m::Tensor;

fn image(c: usize, h: usize, w: usize, phase: f32) -> Tensor<f32> {
    Tensor::from_fn(&[c, h, w], |i| {
        let x = (i % w) as f32;
        let y = ((i / w) % h) as f32;
        0.5 + 0.4 * (0.13 * x + 0.07 * y + phase + (i / (h * w)) as f32).sin()
    })
}

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("default", None), ("one_thread", Some(1))]
}

fn splat(c: &mut Criterion) {
    let (h, w) = (256, 256);
    let colors = image(3, h, w, 0.0);
    let weights = Tensor::full(&[1, h, w], 1.0f32);
    let flow = FlowField::from_fn(h, w, |y, x| (2.5 * (y as f32 * 0.05).sin(), 1.5 * (x as f32 * 0.03).cos()));
    let mut group = c.benchmark_group("splat_256");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || splat_sums(&colors, &weights, flow.tensor()).unwrap()))
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = image(16, 128, 128, 0.3);
    let wts = Tensor::from_fn(&[32, 16, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.01);
    let bias = Tensor::zeros(&[32]);
    let mut group = c.benchmark_group("conv3x3_16to32_128");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || conv2d_raw(&x, &wts, &bias, 1, 1).unwrap()))
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let (h, w) = (128, 128);
    let model = Mrn::<f32>::init(MrnConfig::toy(), 0).unwrap();
    let req = InterpolationRequest {
        i0: image(3, h, w, 0.0),
        i1: image(3, h, w, 0.4),
        times: vec![0.25, 0.5, 0.75],
        flow: FlowSource::Estimate(Default::default()),
        model: &model,
        fill_holes: true,
        n_flows: None,
    };
    let mut group = c.benchmark_group("pipeline_toy_128_x4");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || interpolate(&req).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, splat, conv, pipeline);
criterion_main!(benches);
