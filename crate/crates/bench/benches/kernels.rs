use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdet_core::gradcheck::random_batch;
use voxdet_core::synthetic::{desk_anchor_spec, generate_volume, SyntheticSpec};
use voxdet_core::*;

fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
    let c = [0; 3].map(|_| rng.random_range(0.0..80.0));
    let s = [0; 3].map(|_| rng.random_range(4.0..24.0));
    Box3::new(c, s).unwrap()
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<(Box3, Box3)> = (0..1024).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
    c.bench_function("iou3d/1024_pairs", |b| {
        b.iter(|| pairs.iter().map(|(x, y)| iou3d(black_box(x), black_box(y))).sum::<f64>())
    });

    let spec = AnchorSpec::default();
    c.bench_function("generate_anchors/4x2x4_5_sizes", |b| {
        b.iter(|| generate_anchors(black_box(&spec), [4, 2, 4]).unwrap())
    });
}

fn nms_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [50, 200, 1000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection::new(random_box(&mut rng), rng.random_range(0.0..1.0)))
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &dets, |b, dets| {
            b.iter(|| nms(black_box(dets), 0.1))
        });
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let spec = SyntheticSpec::default();
    let (vol, gts) = generate_volume(&spec, 7).unwrap();
    let anchor_spec = desk_anchor_spec();
    let anchors = generate_anchors(&anchor_spec, anchor_spec.feature_shape(vol.shape)).unwrap();
    let cfg = AssignmentConfig::default();
    c.bench_function("assign_anchors/desk_volume", |b| {
        b.iter(|| assign_anchors(black_box(&anchors), black_box(&gts), &cfg).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let params = LossParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches: Vec<_> = (0..16).map(|_| random_batch(&mut rng, &params, 64).unwrap()).collect();
    c.bench_function("rpn_loss/16_batches", |b| {
        b.iter(|| {
            batches
                .iter()
                .map(|rb| rpn_loss(black_box(&rb.as_batch()), &params).unwrap().l_rpn)
                .sum::<f64>()
        })
    });
}

fn auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("roc_auc");
    for n in [100, 10_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| roc_auc(black_box(&scores), black_box(&labels)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, geometry, nms_bench, assignment, loss, auc);
criterion_main!(benches);
