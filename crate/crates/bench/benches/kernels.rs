use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use panreg_bench::{features, field, rng, volume};
use panreg_core::lat::lat_forward;
use panreg_core::nn::{conv3d, Conv3d};
use panreg_core::{ncc_loss, warp, Interpolation, LatLevel, ModelConfig, PanModel};

fn conv(c: &mut Criterion) {
    let x = features(8, [32, 32, 32], 1);
    let p = Conv3d::new(8, 8, 1, &mut rng(2));
    c.bench_function("conv3d 8->8 32^3", |b| b.iter(|| conv3d(black_box(&x), &p).unwrap()));
}

fn lat(c: &mut Criterion) {
    let dims = [16, 16, 16];
    let fm = features(8, dims, 3);
    let ff = features(8, dims, 4);
    let dm = volume(dims, 5);
    let df = volume(dims, 6);
    let level = LatLevel::new(8, 4, 3, &mut rng(7)).unwrap();
    c.bench_function("lat_forward 4 heads 16^3", |b| {
        b.iter(|| lat_forward(black_box(&fm), &ff, dm.data(), df.data(), &level).unwrap())
    });
}

fn warping(c: &mut Criterion) {
    let v = volume([32, 32, 32], 8);
    let f = field([32, 32, 32], 2.0);
    c.bench_function("warp trilinear 32^3", |b| {
        b.iter(|| warp(black_box(&v), &f, Interpolation::Trilinear).unwrap())
    });
}

fn ncc(c: &mut Criterion) {
    let a = volume([32, 32, 32], 9);
    let b2 = volume([32, 32, 32], 10);
    c.bench_function("ncc window 9 32^3", |b| b.iter(|| ncc_loss(black_box(&a), &b2, 9).unwrap()));
}

fn forward(c: &mut Criterion) {
    let m = volume([32, 32, 32], 11);
    let f = volume([32, 32, 32], 12);
    let model = PanModel::new(ModelConfig::default(), 0).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("register desk 32^3", |b| b.iter(|| model.register(black_box(&m), &f).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, lat, warping, ncc, forward);
criterion_main!(benches);
