//! Evaluation: average mAP over tIoU thresholds, Recall@kx for detection,
//! and per-query Recall@k for grounding. [`reference`] holds deliberately
//! naive reimplementations used as oracles by the verification suites.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::{tiou, TimeSegment, VideoAnnotation};
use crate::postprocess::{sort_predictions, SegmentPrediction};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAp {
    pub class: usize,
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallKx {
    pub k: usize,
    pub tiou: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecall {
    pub k: usize,
    pub tiou: f64,
    pub value: f64,
}

/// Full evaluation result; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    pub per_class_ap: Vec<PerClassAp>,
    pub recall_kx: Option<RecallKx>,
    pub query_recalls: Vec<QueryRecall>,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("evaluation report\n");
        if !self.thresholds.is_empty() {
            out.push_str("threshold  mAP\n");
            for (t, m) in self.thresholds.iter().zip(&self.map_per_threshold) {
                out.push_str(&format!("{t:>9.2}  {m:.6}\n"));
            }
            out.push_str(&format!("average mAP: {:.6}\n", self.average_map));
        }
        if let Some(r) = &self.recall_kx {
            out.push_str(&format!(
                "recall@{}x (tIoU={:.2}): {:.6}\n",
                r.k, r.tiou, r.value
            ));
        }
        for q in &self.query_recalls {
            out.push_str(&format!(
                "R@{} (tIoU={:.2}): {:.6}\n",
                q.k, q.tiou, q.value
            ));
        }
        if !self.per_class_ap.is_empty() {
            out.push_str("per-class AP:\n");
            for pc in &self.per_class_ap {
                out.push_str(&format!(
                    "  class {:>3} @ {:.2}: {:.6}\n",
                    pc.class, pc.threshold, pc.ap
                ));
            }
        }
        out
    }

    /// Flat machine-readable key=value lines, deterministic order.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        for (t, m) in self.thresholds.iter().zip(&self.map_per_threshold) {
            out.push_str(&format!("map_{t:.2} = {m:.9}\n"));
        }
        if !self.thresholds.is_empty() {
            out.push_str(&format!("average_map = {:.9}\n", self.average_map));
        }
        if let Some(r) = &self.recall_kx {
            out.push_str(&format!(
                "recall_{}x_{:.2} = {:.9}\n",
                r.k, r.tiou, r.value
            ));
        }
        for q in &self.query_recalls {
            out.push_str(&format!("r{}_{:.2} = {:.9}\n", q.k, q.tiou, q.value));
        }
        for pc in &self.per_class_ap {
            out.push_str(&format!(
                "ap_class{}_{:.2} = {:.9}\n",
                pc.class, pc.threshold, pc.ap
            ));
        }
        out
    }
}

/// Ground truth flattened to `(video, segment)` pairs per class.
fn class_ground_truth(
    annotations: &[VideoAnnotation],
    class: usize,
) -> Vec<(&str, TimeSegment)> {
    let mut out = Vec::new();
    for ann in annotations {
        for inst in &ann.instances {
            if inst.label == class {
                out.push((ann.video_id.as_str(), inst.segment));
            }
        }
    }
    // Deterministic matching order.
    out.sort_by(|a, b| {
        a.0.cmp(b.0)
            .then(a.1.start().total_cmp(&b.1.start()))
            .then(a.1.end().total_cmp(&b.1.end()))
    });
    out
}

/// Greedy score-ordered matching; returns a TP/FP flag per prediction (in
/// sorted order) plus the number of matched ground truths.
fn greedy_match(
    sorted_preds: &[SegmentPrediction],
    gts: &[(&str, TimeSegment)],
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(sorted_preds.len());
    let mut n_matched = 0;
    for p in sorted_preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (vid, seg)) in gts.iter().enumerate() {
            if matched[gi] || *vid != p.video_id {
                continue;
            }
            let ov = tiou(&p.segment, seg);
            if ov >= threshold {
                match best {
                    Some((_, b)) if b >= ov => {}
                    _ => best = Some((gi, ov)),
                }
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            n_matched += 1;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    (flags, n_matched)
}

/// Area under the all-point precision/recall curve with the monotone
/// precision envelope.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Envelope from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Average precision for one class at one tIoU threshold. `None` when the
/// class has no ground truth (excluded from means rather than scored 0).
pub fn average_precision(
    preds: &[SegmentPrediction],
    annotations: &[VideoAnnotation],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let gts = class_ground_truth(annotations, class);
    if gts.is_empty() {
        return None;
    }
    let mut mine: Vec<SegmentPrediction> =
        preds.iter().filter(|p| p.label == class).cloned().collect();
    sort_predictions(&mut mine);
    let (flags, _) = greedy_match(&mine, &gts, threshold);
    Some(ap_from_flags(&flags, gts.len()))
}

/// Detection evaluation across thresholds; classes without ground truth are
/// skipped. Errors when nothing is scorable.
pub fn average_map(
    preds: &[SegmentPrediction],
    annotations: &[VideoAnnotation],
    classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("average_map needs at least one threshold"));
    }
    let scorable: Vec<usize> = (0..classes)
        .filter(|&c| {
            annotations
                .iter()
                .any(|a| a.instances.iter().any(|i| i.label == c))
        })
        .collect();
    if scorable.is_empty() {
        return Err(Error::data(
            "no class has ground truth; nothing to evaluate",
        ));
    }
    let mut map_per_threshold = Vec::with_capacity(thresholds.len());
    let mut per_class = Vec::new();
    for &t in thresholds {
        let mut sum = 0.0;
        for &c in &scorable {
            let ap = average_precision(preds, annotations, c, t).expect("scorable class");
            per_class.push(PerClassAp {
                class: c,
                threshold: t,
                ap,
            });
            sum += ap;
        }
        map_per_threshold.push(sum / scorable.len() as f64);
    }
    let average_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map_per_threshold,
        average_map,
        per_class_ap: per_class,
        recall_kx: None,
        query_recalls: Vec::new(),
    })
}

/// Recall@kx: per class, keep the top `k * x_c` predictions (x_c = that
/// class's ground-truth count across the dataset), match greedily, then
/// aggregate matched/total over all classes.
pub fn recall_at_kx(
    preds: &[SegmentPrediction],
    annotations: &[VideoAnnotation],
    classes: usize,
    k: usize,
    threshold: f64,
) -> f64 {
    let mut total_gt = 0usize;
    let mut total_matched = 0usize;
    for c in 0..classes {
        let gts = class_ground_truth(annotations, c);
        if gts.is_empty() {
            continue;
        }
        let mut mine: Vec<SegmentPrediction> =
            preds.iter().filter(|p| p.label == c).cloned().collect();
        sort_predictions(&mut mine);
        mine.truncate(k * gts.len());
        let (_, matched) = greedy_match(&mine, &gts, threshold);
        total_gt += gts.len();
        total_matched += matched;
    }
    if total_gt == 0 {
        0.0
    } else {
        total_matched as f64 / total_gt as f64
    }
}

/// Per-query Recall@k: fraction of queries whose top-k predictions contain
/// one reaching the tIoU threshold. Queries without predictions miss.
pub fn recall_at_k_queries(
    preds: &[SegmentPrediction],
    query_gt: &[(String, TimeSegment)],
    k: usize,
    threshold: f64,
) -> f64 {
    if query_gt.is_empty() {
        return 0.0;
    }
    let mut by_query: BTreeMap<&str, Vec<&SegmentPrediction>> = BTreeMap::new();
    for p in preds {
        by_query.entry(p.video_id.as_str()).or_default().push(p);
    }
    let mut hits = 0usize;
    for (qid, gt) in query_gt {
        let Some(list) = by_query.get(qid.as_str()) else {
            continue;
        };
        let mut list: Vec<SegmentPrediction> = list.iter().map(|p| (*p).clone()).collect();
        sort_predictions(&mut list);
        if list
            .iter()
            .take(k)
            .any(|p| tiou(&p.segment, gt) >= threshold)
        {
            hits += 1;
        }
    }
    hits as f64 / query_gt.len() as f64
}

/// Precision/recall points for one class and threshold, for curve dumps.
pub fn pr_points(
    preds: &[SegmentPrediction],
    annotations: &[VideoAnnotation],
    class: usize,
    threshold: f64,
) -> Vec<(f64, f64)> {
    let gts = class_ground_truth(annotations, class);
    if gts.is_empty() {
        return Vec::new();
    }
    let mut mine: Vec<SegmentPrediction> =
        preds.iter().filter(|p| p.label == class).cloned().collect();
    sort_predictions(&mut mine);
    let (flags, _) = greedy_match(&mine, &gts, threshold);
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            if hit {
                tp += 1;
            }
            (tp as f64 / gts.len() as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Naive quadratic reimplementations of every metric, kept intentionally
/// separate from the main code paths. The verification suites compare the
/// optimized metrics against these on randomized datasets.
pub mod reference {
    use super::*;

    fn sorted_clone(preds: &[SegmentPrediction]) -> Vec<SegmentPrediction> {
        let mut v = preds.to_vec();
        // Selection sort on the same deterministic ordering, written
        // independently of the main sort.
        for i in 0..v.len() {
            let mut best = i;
            for j in (i + 1)..v.len() {
                let a = &v[j];
                let b = &v[best];
                let better = match a.score.partial_cmp(&b.score).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => {
                        if a.segment.start() != b.segment.start() {
                            a.segment.start() < b.segment.start()
                        } else if a.label != b.label {
                            a.label < b.label
                        } else {
                            a.video_id < b.video_id
                        }
                    }
                };
                if better {
                    best = j;
                }
            }
            v.swap(i, best);
        }
        v
    }

    fn overlap(a: &TimeSegment, b: &TimeSegment) -> f64 {
        let lo = if a.start() > b.start() { a.start() } else { b.start() };
        let hi = if a.end() < b.end() { a.end() } else { b.end() };
        if hi <= lo {
            return 0.0;
        }
        let inter = hi - lo;
        inter / ((a.end() - a.start()) + (b.end() - b.start()) - inter)
    }

    pub fn average_precision(
        preds: &[SegmentPrediction],
        annotations: &[VideoAnnotation],
        class: usize,
        threshold: f64,
    ) -> Option<f64> {
        let mut gts: Vec<(String, TimeSegment, bool)> = Vec::new();
        for ann in annotations {
            for inst in &ann.instances {
                if inst.label == class {
                    gts.push((ann.video_id.clone(), inst.segment, false));
                }
            }
        }
        gts.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.start().total_cmp(&b.1.start()))
                .then(a.1.end().total_cmp(&b.1.end()))
        });
        if gts.is_empty() {
            return None;
        }
        let mine: Vec<SegmentPrediction> = sorted_clone(
            &preds
                .iter()
                .filter(|p| p.label == class)
                .cloned()
                .collect::<Vec<_>>(),
        );
        let mut flags = Vec::new();
        for p in &mine {
            let mut best_gi = usize::MAX;
            let mut best_ov = -1.0;
            for (gi, (vid, seg, used)) in gts.iter().enumerate() {
                if *used || *vid != p.video_id {
                    continue;
                }
                let ov = overlap(&p.segment, seg);
                if ov >= threshold && ov > best_ov {
                    best_ov = ov;
                    best_gi = gi;
                }
            }
            if best_gi != usize::MAX {
                gts[best_gi].2 = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        // All-point area by explicit suffix-max scanning.
        let n_gt = gts.len();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        let mut tp = 0;
        for i in 0..flags.len() {
            if flags[i] {
                tp += 1;
            }
            let recall = tp as f64 / n_gt as f64;
            if recall > prev_recall {
                // Max precision over all ranks with recall >= this one.
                let mut best_prec = 0.0;
                let mut tp2 = 0;
                for (j, &f2) in flags.iter().enumerate() {
                    if f2 {
                        tp2 += 1;
                    }
                    let r2 = tp2 as f64 / n_gt as f64;
                    if r2 >= recall {
                        let p2 = tp2 as f64 / (j + 1) as f64;
                        if p2 > best_prec {
                            best_prec = p2;
                        }
                    }
                }
                ap += (recall - prev_recall) * best_prec;
                prev_recall = recall;
            }
        }
        Some(ap)
    }

    pub fn average_map(
        preds: &[SegmentPrediction],
        annotations: &[VideoAnnotation],
        classes: usize,
        thresholds: &[f64],
    ) -> Option<(Vec<f64>, f64)> {
        let mut per_threshold = Vec::new();
        for &t in thresholds {
            let mut aps = Vec::new();
            for c in 0..classes {
                if let Some(ap) = average_precision(preds, annotations, c, t) {
                    aps.push(ap);
                }
            }
            if aps.is_empty() {
                return None;
            }
            per_threshold.push(aps.iter().sum::<f64>() / aps.len() as f64);
        }
        let avg = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        Some((per_threshold, avg))
    }

    pub fn recall_at_kx(
        preds: &[SegmentPrediction],
        annotations: &[VideoAnnotation],
        classes: usize,
        k: usize,
        threshold: f64,
    ) -> f64 {
        let mut total = 0usize;
        let mut matched_total = 0usize;
        for c in 0..classes {
            let mut gts: Vec<(String, TimeSegment, bool)> = Vec::new();
            for ann in annotations {
                for inst in &ann.instances {
                    if inst.label == c {
                        gts.push((ann.video_id.clone(), inst.segment, false));
                    }
                }
            }
            gts.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.start().total_cmp(&b.1.start()))
                    .then(a.1.end().total_cmp(&b.1.end()))
            });
            if gts.is_empty() {
                continue;
            }
            let mine = sorted_clone(
                &preds
                    .iter()
                    .filter(|p| p.label == c)
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            let keep = k * gts.len();
            for p in mine.iter().take(keep) {
                let mut best_gi = usize::MAX;
                let mut best_ov = -1.0;
                for (gi, (vid, seg, used)) in gts.iter().enumerate() {
                    if *used || *vid != p.video_id {
                        continue;
                    }
                    let ov = overlap(&p.segment, seg);
                    if ov >= threshold && ov > best_ov {
                        best_ov = ov;
                        best_gi = gi;
                    }
                }
                if best_gi != usize::MAX {
                    gts[best_gi].2 = true;
                    matched_total += 1;
                }
            }
            total += gts.len();
        }
        if total == 0 {
            0.0
        } else {
            matched_total as f64 / total as f64
        }
    }

    pub fn recall_at_k_queries(
        preds: &[SegmentPrediction],
        query_gt: &[(String, TimeSegment)],
        k: usize,
        threshold: f64,
    ) -> f64 {
        if query_gt.is_empty() {
            return 0.0;
        }
        let mut hits = 0;
        for (qid, gt) in query_gt {
            let mine = sorted_clone(
                &preds
                    .iter()
                    .filter(|p| &p.video_id == qid)
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            let mut hit = false;
            for p in mine.iter().take(k) {
                if overlap(&p.segment, gt) >= threshold {
                    hit = true;
                }
            }
            if hit {
                hits += 1;
            }
        }
        hits as f64 / query_gt.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ActionInstance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(s: f64, e: f64) -> TimeSegment {
        TimeSegment::new(s, e).unwrap()
    }

    fn pred(id: &str, s: f64, e: f64, label: usize, score: f64) -> SegmentPrediction {
        SegmentPrediction {
            video_id: id.into(),
            segment: seg(s, e),
            label,
            score,
        }
    }

    fn ann(id: &str, duration: f64, spans: &[(f64, f64, usize)]) -> VideoAnnotation {
        VideoAnnotation {
            video_id: id.into(),
            duration,
            instances: spans
                .iter()
                .map(|&(s, e, c)| ActionInstance::new(seg(s, e), c))
                .collect(),
        }
    }

    #[test]
    fn perfect_predictions_give_ap_one() {
        let anns = vec![ann("v", 10.0, &[(0.0, 2.0, 0), (4.0, 6.0, 0)])];
        let preds = vec![pred("v", 0.0, 2.0, 0, 0.9), pred("v", 4.0, 6.0, 0, 0.8)];
        assert_eq!(average_precision(&preds, &anns, 0, 0.5), Some(1.0));
    }

    #[test]
    fn no_predictions_give_ap_zero() {
        let anns = vec![ann("v", 10.0, &[(0.0, 2.0, 0)])];
        assert_eq!(average_precision(&[], &anns, 0, 0.5), Some(0.0));
    }

    #[test]
    fn class_without_ground_truth_is_excluded() {
        let anns = vec![ann("v", 10.0, &[(0.0, 2.0, 0)])];
        assert_eq!(average_precision(&[], &anns, 3, 0.5), None);
    }

    #[test]
    fn two_gt_three_preds_hits_at_ranks_one_and_three() {
        let anns = vec![ann("v", 20.0, &[(0.0, 2.0, 0), (10.0, 12.0, 0)])];
        let preds = vec![
            pred("v", 0.0, 2.0, 0, 0.9),   // TP
            pred("v", 5.0, 6.0, 0, 0.8),   // FP
            pred("v", 10.0, 12.0, 0, 0.7), // TP
        ];
        let ap = average_precision(&preds, &anns, 0, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn average_map_perfect_is_one_and_no_gt_errors() {
        let anns = vec![ann("v", 10.0, &[(0.0, 2.0, 0), (4.0, 6.0, 1)])];
        let preds = vec![pred("v", 0.0, 2.0, 0, 0.9), pred("v", 4.0, 6.0, 1, 0.8)];
        let rep = average_map(&preds, &anns, 2, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.average_map, 1.0);
        assert_eq!(rep.map_per_threshold.len(), 5);
        let empty = average_map(&preds, &[ann("v", 10.0, &[])], 2, &DEFAULT_THRESHOLDS);
        assert!(empty.is_err());
    }

    #[test]
    fn recall_kx_truncates_per_class_budget() {
        // Class with 2 GTs, k=1: only the top 2 class predictions count, so
        // a rank-3 hit is ignored.
        let anns = vec![ann("v", 30.0, &[(0.0, 2.0, 0), (10.0, 12.0, 0)])];
        let preds = vec![
            pred("v", 0.0, 2.0, 0, 0.9),   // hit
            pred("v", 20.0, 22.0, 0, 0.8), // miss
            pred("v", 10.0, 12.0, 0, 0.7), // would hit, but beyond budget
        ];
        let r = recall_at_kx(&preds, &anns, 1, 1, 0.5);
        assert!((r - 0.5).abs() < 1e-12, "{r}");
        // k=2 admits it.
        let r2 = recall_at_kx(&preds, &anns, 1, 2, 0.5);
        assert_eq!(r2, 1.0);
        // No predictions at all.
        assert_eq!(recall_at_kx(&[], &anns, 1, 1, 0.5), 0.0);
    }

    #[test]
    fn query_recall_cases() {
        let gt = vec![
            ("q1".to_string(), seg(0.0, 2.0)),
            ("q2".to_string(), seg(5.0, 9.0)),
        ];
        let preds = vec![
            pred("q1", 0.0, 2.0, 0, 0.9),
            pred("q2", 20.0, 22.0, 0, 0.95),
            pred("q2", 5.0, 9.0, 0, 0.5),
        ];
        let r1 = recall_at_k_queries(&preds, &gt, 1, 0.5);
        assert!((r1 - 0.5).abs() < 1e-12);
        let r5 = recall_at_k_queries(&preds, &gt, 5, 0.5);
        assert_eq!(r5, 1.0);
        assert!(r5 >= r1);
        // Query with no predictions counts as a miss.
        let gt3 = vec![("q3".to_string(), seg(0.0, 1.0))];
        assert_eq!(recall_at_k_queries(&preds, &gt3, 5, 0.5), 0.0);
    }

    fn random_dataset(
        rng: &mut ChaCha8Rng,
        classes: usize,
    ) -> (Vec<SegmentPrediction>, Vec<VideoAnnotation>) {
        let n_videos = rng.gen_range(1..=10);
        let mut anns = Vec::new();
        let mut preds = Vec::new();
        for v in 0..n_videos {
            let vid = format!("v{v:02}");
            let duration: f64 = rng.gen_range(10.0..60.0);
            let mut spans = Vec::new();
            for _ in 0..rng.gen_range(0..=4) {
                let s = rng.gen_range(0.0..duration - 2.0);
                let e = (s + rng.gen_range(0.5..10.0)).min(duration);
                spans.push((s, e, rng.gen_range(0..classes)));
            }
            anns.push(ann(&vid, duration, &spans));
            for _ in 0..rng.gen_range(0..=12) {
                let s = rng.gen_range(0.0..duration - 1.0);
                let e = (s + rng.gen_range(0.2..12.0)).min(duration);
                preds.push(pred(
                    &vid,
                    s,
                    e,
                    rng.gen_range(0..classes),
                    rng.gen_range(0.0..1.0),
                ));
            }
        }
        (preds, anns)
    }

    #[test]
    fn optimized_metrics_match_reference_on_random_datasets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut scored = 0;
        for _ in 0..60 {
            let classes = rng.gen_range(1..4);
            let (preds, anns) = random_dataset(&mut rng, classes);
            let main = average_map(&preds, &anns, classes, &DEFAULT_THRESHOLDS);
            let refr = reference::average_map(&preds, &anns, classes, &DEFAULT_THRESHOLDS);
            match (main, refr) {
                (Ok(m), Some((per_t, avg))) => {
                    scored += 1;
                    assert!((m.average_map - avg).abs() < 1e-9);
                    for (a, b) in m.map_per_threshold.iter().zip(&per_t) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
                (Err(_), None) => {}
                (m, r) => panic!("scorability disagreement: {m:?} vs {r:?}"),
            }
            let k = rng.gen_range(1..3);
            let t = [0.3, 0.5][rng.gen_range(0..2)];
            let a = recall_at_kx(&preds, &anns, classes, k, t);
            let b = reference::recall_at_kx(&preds, &anns, classes, k, t);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(scored > 20, "too few scorable datasets: {scored}");
    }

    #[test]
    fn metrics_invariant_to_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut preds, anns) = random_dataset(&mut rng, 3);
        while preds.len() < 4 {
            let more = random_dataset(&mut rng, 3);
            preds = more.0;
        }
        let forward = average_map(&preds, &anns, 3, &DEFAULT_THRESHOLDS);
        let mut reversed = preds.clone();
        reversed.reverse();
        let backward = average_map(&reversed, &anns, 3, &DEFAULT_THRESHOLDS);
        match (forward, backward) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => panic!("order changed scorability"),
        }
    }

    #[test]
    fn adding_a_true_positive_never_decreases_ap() {
        // A prediction is only a true positive if it matches a previously
        // unmatched ground truth; duplicates of matched instances are false
        // positives and may lower AP, so the test targets unmatched ones.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut exercised = 0;
        for _ in 0..200 {
            let (mut preds, anns) = random_dataset(&mut rng, 2);
            let Some(ap0) = average_precision(&preds, &anns, 0, 0.5) else {
                continue;
            };
            let gts = class_ground_truth(&anns, 0);
            let mut sorted: Vec<SegmentPrediction> =
                preds.iter().filter(|p| p.label == 0).cloned().collect();
            sort_predictions(&mut sorted);
            let (_, _) = greedy_match(&sorted, &gts, 0.5);
            // Recompute which GTs stay unmatched.
            let mut matched = vec![false; gts.len()];
            for p in &sorted {
                let mut best: Option<(usize, f64)> = None;
                for (gi, (vid, seg)) in gts.iter().enumerate() {
                    if matched[gi] || *vid != p.video_id {
                        continue;
                    }
                    let ov = tiou(&p.segment, seg);
                    if ov >= 0.5 {
                        match best {
                            Some((_, b)) if b >= ov => {}
                            _ => best = Some((gi, ov)),
                        }
                    }
                }
                if let Some((gi, _)) = best {
                    matched[gi] = true;
                }
            }
            let Some(free) = (0..gts.len()).find(|&gi| !matched[gi]) else {
                continue;
            };
            exercised += 1;
            preds.push(SegmentPrediction {
                video_id: gts[free].0.to_string(),
                segment: gts[free].1,
                label: 0,
                score: 2.0, // above every existing score: guaranteed TP
            });
            let ap1 = average_precision(&preds, &anns, 0, 0.5).unwrap();
            assert!(
                ap1 >= ap0 - 1e-12,
                "AP decreased from {ap0} to {ap1} after adding a TP"
            );
        }
        assert!(exercised > 20, "too few cases exercised: {exercised}");
    }

    #[test]
    fn report_rendering_is_stable() {
        let rep = EvalReport {
            thresholds: vec![0.1, 0.5],
            map_per_threshold: vec![0.75, 0.5],
            average_map: 0.625,
            per_class_ap: vec![PerClassAp {
                class: 0,
                threshold: 0.1,
                ap: 0.75,
            }],
            recall_kx: Some(RecallKx {
                k: 1,
                tiou: 0.5,
                value: 0.4,
            }),
            query_recalls: vec![QueryRecall {
                k: 5,
                tiou: 0.3,
                value: 0.9,
            }],
        };
        let kv = rep.render_kv();
        assert!(kv.contains("average_map = 0.625000000"));
        assert!(kv.contains("recall_1x_0.50 = 0.400000000"));
        assert!(kv.contains("r5_0.30 = 0.900000000"));
        let txt = rep.render_text();
        assert!(txt.contains("average mAP"));
    }
}
