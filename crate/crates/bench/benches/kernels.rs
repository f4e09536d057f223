use criterion::{criterion_group, criterion_main, Criterion};
use geoshift::geometry::{warp, warp_param_gradient, HomographyParams};
use geoshift::multiwarp::NormModes;
use geoshift::nn::Conv2d;
use geoshift::transform_approx::{fit_nested, FitConfig, Grid};
use geoshift::ShiftSpec;
use geoshift_bench::{maps, multiwarp_model, rng};
use std::hint::black_box;

fn warping(c: &mut Criterion) {
    let x = maps(8, 32, 16, 16);
    let h = HomographyParams::new(0.8, 1.3, 0.1, -0.2).unwrap();
    c.bench_function("warp 8x32x16x16", |b| b.iter(|| warp(black_box(&x), &h).unwrap()));
    let g = maps(8, 32, 16, 16);
    c.bench_function("warp param gradient 8x32x16x16", |b| {
        b.iter(|| warp_param_gradient(black_box(&x), &h, &g).unwrap())
    });
}

fn convolution(c: &mut Criterion) {
    let conv = Conv2d::<f32>::new(32, 32, 3, 1, &mut rng());
    let x = maps(8, 32, 16, 16);
    c.bench_function("conv3x3 32->32 8x16x16", |b| b.iter(|| conv.forward(black_box(&x)).unwrap()));
}

fn detector(c: &mut Criterion) {
    let model = multiwarp_model(5);
    let images = maps(8, 3, 64, 64);
    c.bench_function("detect N=5 batch 8", |b| {
        b.iter(|| model.detect(black_box(&images), 0.05, 0.5).unwrap())
    });
    let mut train = model.clone();
    c.bench_function("forward N=5 batch 8 (with caches)", |b| {
        b.iter(|| train.forward(black_box(&images), NormModes::EVAL).unwrap())
    });
}

fn fitting(c: &mut Criterion) {
    let mapping = ShiftSpec::default().mapping().unwrap();
    let grid = Grid::new(32, 32).unwrap();
    let cfg = FitConfig::default();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("nested N<=3 on 32x32", |b| {
        b.iter(|| fit_nested(black_box(&mapping), 3, grid, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, warping, convolution, detector, fitting);
criterion_main!(benches);
