use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asl_core::autodiff::Tensor;
use asl_core::geom::{tiou, ActionInstance, TimeSegment, VideoAnnotation};
use asl_core::metrics::average_map;
use asl_core::network::{Model, ModelConfig, VideoInput};
use asl_core::postprocess::{soft_nms, DecodeConfig, SegmentPrediction};
use asl_core::pyramid::{assign_labels, build_pyramid};

fn random_predictions(n: usize, seed: u64) -> Vec<SegmentPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: f64 = rng.gen_range(0.0..200.0);
            SegmentPrediction {
                video_id: format!("v{:02}", rng.gen_range(0..8)),
                segment: TimeSegment::new(s, s + rng.gen_range(0.5..20.0)).unwrap(),
                label: rng.gen_range(0..10),
                score: rng.gen_range(0.001..1.0),
            }
        })
        .collect()
}

fn bench_tiou(c: &mut Criterion) {
    let a = TimeSegment::new(3.0, 11.0).unwrap();
    let b = TimeSegment::new(7.5, 14.0).unwrap();
    c.bench_function("tiou", |bch| bch.iter(|| tiou(black_box(&a), black_box(&b))));
}

fn bench_soft_nms(c: &mut Criterion) {
    let preds = random_predictions(500, 3);
    let cfg = DecodeConfig {
        score_floor: 0.0,
        pre_nms_topk: 10_000,
        nms_sigma: 0.5,
        min_score: 0.001,
        max_keep: 200,
        per_class: true,
    };
    c.bench_function("soft_nms_500", |bch| {
        bch.iter(|| soft_nms(black_box(&preds), black_box(&cfg)))
    });
}

fn bench_assignment(c: &mut Criterion) {
    let points = build_pyramid(1024, 6, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instances: Vec<ActionInstance> = (0..12)
        .map(|_| {
            let s: f64 = rng.gen_range(0.0..900.0);
            ActionInstance::new(
                TimeSegment::new(s, s + rng.gen_range(2.0..80.0)).unwrap(),
                rng.gen_range(0..20),
            )
        })
        .collect();
    let ann = VideoAnnotation {
        video_id: "v".into(),
        duration: 1024.0,
        instances,
    };
    c.bench_function("assign_labels_1024x6", |bch| {
        bch.iter(|| assign_labels(black_box(&points), black_box(&ann)))
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig {
        classes: 5,
        source_dims: vec![16],
        proj_dims: vec![64],
        embed_dim: 64,
        heads: 4,
        depth: 2,
        levels: 4,
        head_convs: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let video = VideoInput {
        sources: vec![Tensor::randn(&[256, 16], 1.0, &mut rng)],
        stride_seconds: 1.0,
    };
    c.bench_function("forward_t256_e64", |bch| {
        bch.iter(|| model.forward_dense(black_box(&video), None).unwrap())
    });
}

fn bench_average_map(c: &mut Criterion) {
    let preds = random_predictions(2000, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let annotations: Vec<VideoAnnotation> = (0..8)
        .map(|v| {
            let instances = (0..10)
                .map(|_| {
                    let s: f64 = rng.gen_range(0.0..180.0);
                    ActionInstance::new(
                        TimeSegment::new(s, s + rng.gen_range(1.0..25.0)).unwrap(),
                        rng.gen_range(0..10),
                    )
                })
                .collect();
            VideoAnnotation {
                video_id: format!("v{v:02}"),
                duration: 220.0,
                instances,
            }
        })
        .collect();
    c.bench_function("average_map_2000x80", |bch| {
        bch.iter(|| average_map(black_box(&preds), black_box(&annotations), 10, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap())
    });
}

criterion_group!(
    benches,
    bench_tiou,
    bench_soft_nms,
    bench_assignment,
    bench_forward,
    bench_average_map
);
criterion_main!(benches);
