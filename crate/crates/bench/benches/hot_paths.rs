use criterion::{criterion_group, criterion_main, Criterion};
use pointcaps::dataio::{generate_dataset, Family};
use pointcaps::losses::{chamfer, chamfer_fast};
use pointcaps::routing::route;
use pointcaps::spatial::KdTree;
use pointcaps::{ModelConfig, PointCapsNet};
use std::hint::black_box;

fn chamfer_variants(c: &mut Criterion) {
    let clouds =
        generate_dataset(&[Family::Barbell, Family::TorusOnBox], 1, 2048, 0.005, 1).unwrap();
    let (x, y) = (&clouds[0], &clouds[1]);
    let tree = KdTree::new(y.points.clone());
    c.bench_function("chamfer/brute-2048", |b| {
        b.iter(|| chamfer(black_box(x), black_box(y)).unwrap())
    });
    c.bench_function("chamfer/kdtree-2048", |b| {
        b.iter(|| chamfer_fast(black_box(x), black_box(y), &tree).unwrap())
    });
}

fn model_passes(c: &mut Criterion) {
    let mut cfg = ModelConfig::default();
    cfg.encoder.branch_width = 128;
    let net = PointCapsNet::<f32>::new(cfg.clone(), 1).unwrap();
    let cloud = generate_dataset(&[Family::WingedCross], 1, cfg.encoder.n_points, 0.005, 2)
        .unwrap()
        .remove(0);
    let ppc = net.primary(&cloud).unwrap();
    let latent = net.encode(&cloud).unwrap();
    let grid = net.grid(0);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("primary", |b| {
        b.iter(|| net.primary(black_box(&cloud)).unwrap())
    });
    group.bench_function("route", |b| {
        b.iter(|| route(black_box(&ppc), &cfg.routing, &net.store).unwrap())
    });
    group.bench_function("decode", |b| {
        b.iter(|| net.decode(black_box(&latent), &grid).unwrap())
    });
    group.finish();
}

criterion_group!(benches, chamfer_variants, model_passes);
criterion_main!(benches);
