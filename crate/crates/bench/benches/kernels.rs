use std::hint::black_box;

use ccnet_core::evaluation::{compute_stats, gray_edge1, gray_world};
use ccnet_core::network::image_batch;
use ccnet_core::training::multistage_angular_loss;
use ccnet_core::{rng, CascadeModel, Domain, Graph, LinearImage, ModelConfig, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(side: usize, seed: u64) -> LinearImage {
    let mut r = rng::seeded(seed);
    let px = (0..side * side).map(|_| [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()]).collect();
    LinearImage::new(side, side, px, Domain::Raw).unwrap()
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, hw) in [(3, 16, 32), (16, 32, 16), (64, 64, 16)] {
        let x = random_tensor(&[4, cin, hw, hw], 1);
        let w = random_tensor(&[cout, cin, 3, 3], 2);
        group.bench_function(BenchmarkId::new("forward+backward", format!("{cin}x{cout}@{hw}")), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xi = g.param(x.clone()).unwrap();
                let wi = g.param(w.clone()).unwrap();
                let y = g.conv2d(xi, wi, None, 1, 1).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(wi).map(|v| v[0]))
            })
        });
    }
    group.finish();
}

fn cascade(c: &mut Criterion) {
    let model = CascadeModel::new(ModelConfig::default()).unwrap();
    let images: Vec<LinearImage> = (0..8).map(|i| random_image(32, 10 + i)).collect();
    let refs: Vec<&LinearImage> = images.iter().collect();
    let batch = image_batch(&refs).unwrap();
    let labels = Tensor::new(vec![8, 3], [0.4, 0.8, 0.3].repeat(8)).unwrap();
    let mut group = c.benchmark_group("cascade_toy_m3_batch8_32px");
    group.sample_size(20);
    group.bench_function("predict", |b| b.iter(|| black_box(model.predict(batch.clone()).unwrap())));
    group.bench_function("train_step_graph", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let ids = model.bind(&mut g, true).unwrap();
            let x = g.constant(batch.clone()).unwrap();
            let y = g.constant(labels.clone()).unwrap();
            let out = model.forward(&mut g, &ids, x).unwrap();
            let loss = multistage_angular_loss(&mut g, &out.stages, y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).item().unwrap())
        })
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut r = rng::seeded(3);
    let errors: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..30.0)).collect();
    c.bench_function("compute_stats_10k", |b| b.iter(|| black_box(compute_stats(&errors).unwrap())));
    let image = random_image(128, 4);
    c.bench_function("gray_world_128px", |b| b.iter(|| black_box(gray_world(&image).unwrap())));
    c.bench_function("gray_edge1_128px", |b| b.iter(|| black_box(gray_edge1(&image, 6.0, 1.0).unwrap())));
}

criterion_group!(benches, conv2d, cascade, evaluation);
criterion_main!(benches);
