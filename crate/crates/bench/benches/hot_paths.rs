use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attreg::data::{make_pair, toy_model, PairConfig, Regime};
use attreg::geom::{kabsch, knn, KdTree, Point3, RigidTransform};
use attreg::model::matcher::assignment;
use attreg::model::{Model, ModelConfig};
use attreg::pipeline::{icp, IcpConfig};
use attreg::tensor::Tensor;
use attreg::train::{batch_loss, AdamW, AdamWConfig};
use attreg::train::train_step;

fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

fn geometry(c: &mut Criterion) {
    let pts = random_points(1024, 1);
    let t = RigidTransform::from_axis_angle(Vector3::new(0.2, 0.5, 1.0), 0.8, Vector3::new(0.1, -0.2, 0.3));
    let moved = t.apply_points(&pts);
    c.bench_function("kabsch_1024", |b| b.iter(|| kabsch(&pts, &moved, None).unwrap()));
    c.bench_function("kdtree_build_1024", |b| b.iter(|| KdTree::new(&pts)));
    c.bench_function("knn20_1024", |b| b.iter(|| knn(&pts, 20).unwrap()));
    let cloud = toy_model(3, 1024).unwrap();
    let small = RigidTransform::from_axis_angle(Vector3::z(), 5f64.to_radians(), Vector3::zeros());
    let target = attreg::apply_transform(&small, &cloud);
    c.bench_function("icp_1024_5deg", |b| {
        b.iter(|| icp(&cloud, &target, &RigidTransform::identity(), &IcpConfig::default()).unwrap())
    });
}

fn sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn_10");
    for n in [64usize, 256, 717] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let scores = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| b.iter(|| assignment(s, 1.0, 10).unwrap()));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let model = Model::new(ModelConfig::small(32, 2, 8), 0).unwrap();
    let shape = toy_model(1, 64).unwrap();
    let cfg = PairConfig { points_per_cloud: 64, regime: Regime::Noise, seed: 2, ..PairConfig::default() };
    let ex = make_pair(&shape, "toy", &cfg).unwrap();
    c.bench_function("toy_forward_64", |b| b.iter(|| model.predict(&ex.source, &ex.reference).unwrap()));
    c.bench_function("toy_forward_backward_64", |b| b.iter(|| batch_loss(&model, std::slice::from_ref(&ex)).unwrap()));
    let mut m = model.clone();
    let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
    let batch = vec![ex.clone(); 8];
    c.bench_function("toy_train_step_batch8", |b| b.iter(|| train_step(&mut m, &mut opt, &batch).unwrap()));

    let mut group = c.benchmark_group("full_size_forward");
    group.sample_size(10);
    let full = Model::new(ModelConfig::default(), 0).unwrap();
    let shape = toy_model(1, 1024).unwrap();
    let cfg = PairConfig { points_per_cloud: 717, regime: Regime::Noise, seed: 3, ..PairConfig::default() };
    let ex = make_pair(&shape, "toy", &cfg).unwrap();
    group.bench_function("717_points", |b| b.iter(|| full.predict(&ex.source, &ex.reference).unwrap()));
    group.finish();
}

criterion_group!(benches, geometry, sinkhorn, network);
criterion_main!(benches);
