//! From dense outputs to final predictions: decoding, SoftNMS and the two
//! ensembling strategies.

use crate::error::{Error, Result};
use crate::geom::{tiou, TimeSegment};
use crate::network::DenseOutput;
use crate::pyramid::PyramidPoint;

/// One scored segment hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPrediction {
    pub video_id: String,
    pub segment: TimeSegment,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    /// Minimum sigmoid score for a point/class hypothesis.
    pub score_floor: f64,
    /// Keep at most this many candidates per video before suppression.
    pub pre_nms_topk: usize,
    /// Gaussian decay width of SoftNMS.
    pub nms_sigma: f64,
    /// SoftNMS stops once the best remaining score falls below this.
    pub min_score: f64,
    /// Final cap on survivors per video.
    pub max_keep: usize,
    /// Suppress within the same class only (detection) or globally
    /// (single-query retrieval).
    pub per_class: bool,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_floor >= 0.0 && self.score_floor < 1.0) {
            return Err(Error::config(format!(
                "score_floor must be in [0,1), got {}",
                self.score_floor
            )));
        }
        if self.nms_sigma <= 0.0 {
            return Err(Error::config(format!(
                "nms_sigma must be > 0, got {}",
                self.nms_sigma
            )));
        }
        if self.pre_nms_topk == 0 || self.max_keep == 0 {
            return Err(Error::config("pre_nms_topk and max_keep must be >= 1"));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic ordering: score desc, then earlier start, then label,
/// then video id.
fn prediction_order(a: &SegmentPrediction, b: &SegmentPrediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start().total_cmp(&b.segment.start()))
        .then(a.label.cmp(&b.label))
        .then(a.video_id.cmp(&b.video_id))
}

/// Sorts predictions into the crate-wide deterministic order.
pub fn sort_predictions(preds: &mut [SegmentPrediction]) {
    preds.sort_by(prediction_order);
}

/// Turns dense outputs into scored segments.
///
/// Every point/class pair at or above `score_floor` becomes a candidate
/// `(t - d_start, t + d_end)` clipped to the video; the best
/// `pre_nms_topk` by score survive.
pub fn decode_dense(
    video_id: &str,
    points: &[PyramidPoint],
    dense: &DenseOutput,
    duration: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<SegmentPrediction>> {
    let (n, classes) = dense.cls.dims2()?;
    if n != points.len() || dense.loc.shape() != [n, 2] {
        return Err(Error::ShapeMismatch {
            op: "decode_dense",
            lhs: dense.cls.shape().to_vec(),
            rhs: vec![points.len(), classes],
        });
    }
    let mut out = Vec::new();
    for (i, point) in points.iter().enumerate() {
        let d_start = dense.loc.at2(i, 0);
        let d_end = dense.loc.at2(i, 1);
        for c in 0..classes {
            let score = sigmoid(dense.cls.at2(i, c));
            if score < cfg.score_floor {
                continue;
            }
            let raw_start = point.t_center - d_start;
            let raw_end = point.t_center + d_end;
            let Ok(seg) = TimeSegment::new(raw_start.max(0.0), raw_end) else {
                continue;
            };
            let Some(seg) = seg.clipped(duration) else {
                continue;
            };
            out.push(SegmentPrediction {
                video_id: video_id.to_string(),
                segment: seg,
                label: c,
                score,
            });
        }
    }
    sort_predictions(&mut out);
    out.truncate(cfg.pre_nms_topk);
    Ok(out)
}

/// SoftNMS with Gaussian score decay.
///
/// Repeatedly promotes the highest-scoring candidate and decays the scores
/// of its same-class overlaps by `exp(-tIoU^2 / sigma)`. Stops at `max_keep`
/// survivors or when the best remaining score drops below `min_score`.
/// Promoted scores are final; they never increase.
pub fn soft_nms(preds: &[SegmentPrediction], cfg: &DecodeConfig) -> Vec<SegmentPrediction> {
    let mut pool: Vec<SegmentPrediction> = preds.to_vec();
    let mut kept: Vec<SegmentPrediction> = Vec::new();
    while kept.len() < cfg.max_keep && !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| prediction_order(a, b))
            .map(|(i, _)| i)
            .expect("non-empty pool");
        if pool[best].score < cfg.min_score {
            break;
        }
        let winner = pool.swap_remove(best);
        for p in pool.iter_mut() {
            if cfg.per_class && p.label != winner.label {
                continue;
            }
            let overlap = tiou(&p.segment, &winner.segment);
            if overlap > 0.0 {
                p.score *= (-(overlap * overlap) / cfg.nms_sigma).exp();
            }
        }
        kept.push(winner);
    }
    sort_predictions(&mut kept);
    kept
}

/// Elementwise mean of dense outputs from several models.
///
/// Computed as `x0 + mean(xi - x0)` so an ensemble of identical outputs
/// reproduces them bit-exactly.
pub fn ensemble_mean_logits(outputs: &[DenseOutput]) -> Result<DenseOutput> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::invalid("ensemble of zero outputs"))?;
    for (i, o) in outputs.iter().enumerate() {
        if o.cls.shape() != first.cls.shape() || o.loc.shape() != first.loc.shape() {
            return Err(Error::ShapeMismatch {
                op: "ensemble_mean_logits",
                lhs: first.cls.shape().to_vec(),
                rhs: o.cls.shape().to_vec(),
            });
        }
        let _ = i;
    }
    let e = outputs.len() as f64;
    let mut cls = first.cls.clone();
    let mut loc = first.loc.clone();
    for j in 0..cls.numel() {
        let base = first.cls.data()[j];
        let mut acc = 0.0;
        for o in outputs {
            acc += o.cls.data()[j] - base;
        }
        cls.data_mut()[j] = base + acc / e;
    }
    for j in 0..loc.numel() {
        let base = first.loc.data()[j];
        let mut acc = 0.0;
        for o in outputs {
            acc += o.loc.data()[j] - base;
        }
        loc.data_mut()[j] = base + acc / e;
    }
    Ok(DenseOutput { cls, loc })
}

/// Confidence-sorted merge of per-model top-K lists, truncated to `k_out`.
pub fn ensemble_topk_merge(
    lists: &[Vec<SegmentPrediction>],
    k_out: usize,
) -> Vec<SegmentPrediction> {
    let mut all: Vec<SegmentPrediction> = lists.iter().flatten().cloned().collect();
    sort_predictions(&mut all);
    all.truncate(k_out);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{ActionInstance, VideoAnnotation};
    use crate::pyramid::{assign_labels, build_pyramid};
    use proptest::prelude::*;

    fn cfg() -> DecodeConfig {
        DecodeConfig {
            score_floor: 0.01,
            pre_nms_topk: 200,
            nms_sigma: 0.5,
            min_score: 0.001,
            max_keep: 100,
            per_class: true,
        }
    }

    fn pred(id: &str, s: f64, e: f64, label: usize, score: f64) -> SegmentPrediction {
        SegmentPrediction {
            video_id: id.into(),
            segment: TimeSegment::new(s, e).unwrap(),
            label,
            score,
        }
    }

    fn dense_for(points: usize, classes: usize, fill_logit: f64) -> DenseOutput {
        DenseOutput {
            cls: crate::autodiff::Tensor::full(&[points, classes], fill_logit),
            loc: crate::autodiff::Tensor::ones(&[points, 2]),
        }
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        let points = build_pyramid(8, 1, 1.0).unwrap();
        let dense = dense_for(8, 3, -40.0);
        let out = decode_dense("v", &points, &dense, 8.0, &cfg()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_point_offsets_reconstruct_segment() {
        let mut points = build_pyramid(8, 1, 1.0).unwrap();
        points.truncate(1);
        points[0].t_center = 5.0;
        let mut dense = dense_for(1, 1, -40.0);
        dense.cls.data_mut()[0] = 3.0;
        dense.loc.data_mut()[0] = 1.0;
        dense.loc.data_mut()[1] = 1.0;
        let out = decode_dense("v", &points, &dense, 10.0, &cfg()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].segment.start(), 4.0);
        assert_eq!(out[0].segment.end(), 6.0);
    }

    #[test]
    fn segments_are_clipped_to_video() {
        let mut points = build_pyramid(8, 1, 1.0).unwrap();
        points.truncate(1);
        points[0].t_center = 1.0;
        let mut dense = dense_for(1, 1, 5.0);
        dense.loc.data_mut()[0] = 4.0; // would start at -3
        dense.loc.data_mut()[1] = 100.0; // would end at 101
        let out = decode_dense("v", &points, &dense, 8.0, &cfg()).unwrap();
        assert_eq!(out[0].segment.start(), 0.0);
        assert_eq!(out[0].segment.end(), 8.0);
    }

    #[test]
    fn decode_of_perfect_outputs_recovers_ground_truth() {
        // Round trip: assign labels, write perfect dense outputs, decode.
        let points = build_pyramid(32, 3, 1.0).unwrap();
        let ann = VideoAnnotation {
            video_id: "v".into(),
            duration: 32.0,
            instances: vec![
                ActionInstance::new(TimeSegment::new(2.0, 9.0).unwrap(), 1),
                ActionInstance::new(TimeSegment::new(14.0, 17.5).unwrap(), 0),
                ActionInstance::new(TimeSegment::new(20.0, 30.0).unwrap(), 2),
            ],
        };
        let targets = assign_labels(&points, &ann);
        assert!(targets.n_pos > 0);
        let mut dense = dense_for(points.len(), 3, -40.0);
        for i in 0..points.len() {
            if let Some(c) = targets.class_target[i] {
                dense.cls.data_mut()[i * 3 + c] = 40.0;
                dense.loc.data_mut()[i * 2] = targets.offsets[i][0];
                dense.loc.data_mut()[i * 2 + 1] = targets.offsets[i][1];
            }
        }
        let decoded = decode_dense("v", &points, &dense, 32.0, &cfg()).unwrap();
        for inst in &ann.instances {
            let hit = decoded.iter().any(|p| {
                p.label == inst.label && tiou(&p.segment, &inst.segment) > 1.0 - 1e-9
            });
            assert!(hit, "instance {:?} not recovered", inst.segment);
        }
    }

    #[test]
    fn soft_nms_single_prediction_unchanged() {
        let p = pred("v", 0.0, 2.0, 0, 0.7);
        let out = soft_nms(&[p.clone()], &cfg());
        assert_eq!(out, vec![p]);
    }

    #[test]
    fn soft_nms_identical_pair_decay() {
        let a = pred("v", 0.0, 2.0, 0, 0.9);
        let b = pred("v", 0.0, 2.0, 0, 0.8);
        let out = soft_nms(&[a, b], &cfg());
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        let want = 0.8 * (-2.0f64).exp();
        assert!((out[1].score - want).abs() < 1e-12, "{}", out[1].score);
        assert!((out[1].score - 0.108_268_226_589_290_17).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_disjoint_unchanged() {
        let a = pred("v", 0.0, 2.0, 0, 0.9);
        let b = pred("v", 5.0, 7.0, 0, 0.8);
        let c = pred("v", 10.0, 12.0, 0, 0.7);
        let out = soft_nms(&[a, b, c], &cfg());
        let scores: Vec<f64> = out.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn soft_nms_other_class_not_decayed() {
        let a = pred("v", 0.0, 2.0, 0, 0.9);
        let b = pred("v", 0.0, 2.0, 1, 0.8);
        let out = soft_nms(&[a, b], &cfg());
        assert_eq!(out[1].score, 0.8);
        // Global mode decays across classes.
        let mut global = cfg();
        global.per_class = false;
        let out = soft_nms(
            &[pred("v", 0.0, 2.0, 0, 0.9), pred("v", 0.0, 2.0, 1, 0.8)],
            &global,
        );
        assert!(out[1].score < 0.8);
    }

    #[test]
    fn ensemble_mean_identity_and_average() {
        let d = DenseOutput {
            cls: crate::autodiff::Tensor::from_vec(vec![0.1, -0.7, 2.0])
                .reshaped(&[3, 1])
                .unwrap(),
            loc: crate::autodiff::Tensor::ones(&[3, 2]),
        };
        // Identical copies reproduce the input bit-exactly, any E.
        for e in [1, 2, 3, 5] {
            let copies: Vec<DenseOutput> = (0..e).map(|_| d.clone()).collect();
            let m = ensemble_mean_logits(&copies).unwrap();
            assert_eq!(m, d, "E={e}");
        }
        // Two different outputs average elementwise.
        let mut d2 = d.clone();
        for v in d2.cls.data_mut() {
            *v += 2.0;
        }
        let m = ensemble_mean_logits(&[d.clone(), d2]).unwrap();
        assert!((m.cls.data()[0] - 1.1).abs() < 1e-15);
        // Shape mismatch rejected.
        let bad = DenseOutput {
            cls: crate::autodiff::Tensor::zeros(&[2, 1]),
            loc: crate::autodiff::Tensor::zeros(&[2, 2]),
        };
        assert!(ensemble_mean_logits(&[d, bad]).is_err());
    }

    #[test]
    fn topk_merge_cases() {
        let model_a = vec![
            pred("q", 0.0, 1.0, 0, 0.9),
            pred("q", 1.0, 2.0, 0, 0.8),
            pred("q", 2.0, 3.0, 0, 0.7),
            pred("q", 3.0, 4.0, 0, 0.6),
            pred("q", 4.0, 5.0, 0, 0.5),
            pred("q", 5.0, 6.0, 0, 0.4),
        ];
        // One model: its own top 5.
        let merged = ensemble_topk_merge(&[model_a.clone()], 5);
        assert_eq!(merged.len(), 5);
        assert_eq!(merged[0].score, 0.9);
        // Disjoint ranges: the stronger model wins every slot.
        let model_b: Vec<SegmentPrediction> = (0..5)
            .map(|i| pred("q", i as f64, i as f64 + 1.0, 0, 0.95 - 0.001 * i as f64))
            .collect();
        let merged = ensemble_topk_merge(&[model_a, model_b.clone()], 5);
        for (m, b) in merged.iter().zip(&model_b) {
            assert_eq!(m.score, b.score);
        }
    }

    proptest! {
        #[test]
        fn soft_nms_never_increases_scores_and_keeps_top(
            n in 1usize..24,
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<SegmentPrediction> = (0..n).map(|_| {
                let s = rng.gen_range(0.0..20.0);
                pred("v", s, s + rng.gen_range(0.2..5.0), rng.gen_range(0..3), rng.gen_range(0.01..1.0))
            }).collect();
            let mut c = cfg();
            c.max_keep = rng.gen_range(1..30);
            let out = soft_nms(&preds, &c);
            prop_assert!(out.len() <= c.max_keep);
            // Top input survives with its exact score.
            let top = preds.iter().cloned().min_by(|a, b| prediction_order(a, b)).unwrap();
            if !out.is_empty() {
                prop_assert_eq!(out[0].score, top.score);
                prop_assert_eq!(out[0].segment, top.segment);
            }
            // No score ever exceeds its original value.
            for o in &out {
                let orig = preds.iter().filter(|p| p.segment == o.segment && p.label == o.label)
                    .map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o.score <= orig + 1e-15);
            }
        }

        #[test]
        fn tiny_sigma_approaches_hard_nms(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2usize..12);
            // Segments on a coarse grid so overlaps are either 0 or clearly
            // positive, never borderline.
            let preds: Vec<SegmentPrediction> = (0..n).map(|_| {
                let s = rng.gen_range(0..10) as f64 * 2.0;
                let e = s + rng.gen_range(1..4) as f64 * 2.0;
                pred("v", s, e, 0, rng.gen_range(0.05..1.0))
            }).collect();

            let mut c = cfg();
            c.nms_sigma = 1e-9;
            c.min_score = 0.01;
            c.max_keep = 100;
            let soft = soft_nms(&preds, &c);

            // Hard NMS oracle: greedy keep, drop any positive overlap.
            let mut rest: Vec<SegmentPrediction> = preds.clone();
            let mut hard: Vec<SegmentPrediction> = Vec::new();
            while !rest.is_empty() {
                let best = rest.iter().enumerate()
                    .min_by(|(_, a), (_, b)| prediction_order(a, b)).map(|(i, _)| i).unwrap();
                let w = rest.swap_remove(best);
                rest.retain(|p| tiou(&p.segment, &w.segment) == 0.0);
                hard.push(w);
            }
            crate::postprocess::sort_predictions(&mut hard);

            let key = |p: &SegmentPrediction| (p.segment.start().to_bits(), p.segment.end().to_bits());
            let soft_keys: Vec<_> = soft.iter().map(key).collect();
            let hard_keys: Vec<_> = hard.iter().map(key).collect();
            prop_assert_eq!(soft_keys, hard_keys);
        }
    }
}
