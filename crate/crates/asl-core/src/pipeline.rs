//! Inference and evaluation workflows shared by the command-line tool and
//! the verification suites: dense prediction with optional mean-logit
//! ensembling, SoftNMS decoding, and report assembly.

use rayon::prelude::*;

use crate::data::dataset::Dataset;
use crate::data::run_config::EvalSettings;
use crate::error::{Error, Result};
use crate::geom::TimeSegment;
use crate::metrics::{self, EvalReport, QueryRecall, RecallKx};
use crate::network::{DenseOutput, Mode, Model};
use crate::postprocess::{
    decode_dense, ensemble_mean_logits, soft_nms, DecodeConfig, SegmentPrediction,
};

fn check_models(models: &[Model]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("prediction needs at least one model"))?;
    for m in &models[1..] {
        if m.config() != first.config() {
            return Err(Error::config(
                "ensemble members must share an identical model configuration",
            ));
        }
    }
    Ok(())
}

/// Runs every model over the dataset and decodes (mean-logit ensembled)
/// dense outputs into final predictions. Detection mode.
pub fn predict_mq(
    models: &[Model],
    dataset: &Dataset,
    decode: &DecodeConfig,
) -> Result<Vec<SegmentPrediction>> {
    check_models(models)?;
    if dataset.mode != Mode::Mq {
        return Err(Error::config("predict_mq needs a detection dataset"));
    }
    let per_video: Vec<Result<Vec<SegmentPrediction>>> = dataset
        .videos
        .par_iter()
        .map(|video| {
            let denses: Vec<DenseOutput> = models
                .iter()
                .map(|m| m.forward_dense(&video.input, None))
                .collect::<Result<_>>()?;
            let dense = ensemble_mean_logits(&denses)?;
            let points = models[0]
                .pyramid_points(video.input.frames(), video.input.stride_seconds)?;
            let decoded = decode_dense(
                &video.annotation.video_id,
                &points,
                &dense,
                video.annotation.duration,
                decode,
            )?;
            Ok(soft_nms(&decoded, decode))
        })
        .collect();
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}

/// Per-query prediction for grounding: forward with each query's tokens,
/// ensemble, decode, suppress globally. Predictions carry the query id.
pub fn predict_nlq(
    models: &[Model],
    dataset: &Dataset,
    decode: &DecodeConfig,
) -> Result<Vec<SegmentPrediction>> {
    check_models(models)?;
    if dataset.mode != Mode::Nlq {
        return Err(Error::config("predict_nlq needs a grounding dataset"));
    }
    let work: Vec<(usize, usize)> = dataset
        .videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.queries.len()).map(move |qi| (vi, qi)))
        .collect();
    let per_query: Vec<Result<Vec<SegmentPrediction>>> = work
        .par_iter()
        .map(|&(vi, qi)| {
            let video = &dataset.videos[vi];
            let query = &video.queries[qi];
            let denses: Vec<DenseOutput> = models
                .iter()
                .map(|m| m.forward_dense(&video.input, Some(&query.tokens)))
                .collect::<Result<_>>()?;
            let dense = ensemble_mean_logits(&denses)?;
            let points = models[0]
                .pyramid_points(video.input.frames(), video.input.stride_seconds)?;
            let decoded = decode_dense(
                &query.id,
                &points,
                &dense,
                video.annotation.duration,
                decode,
            )?;
            Ok(soft_nms(&decoded, decode))
        })
        .collect();
    let mut out = Vec::new();
    for q in per_query {
        out.extend(q?);
    }
    Ok(out)
}

/// Detection report: average mAP over the configured thresholds plus
/// Recall@kx.
pub fn evaluate_mq(
    preds: &[SegmentPrediction],
    dataset: &Dataset,
    eval: &EvalSettings,
) -> Result<EvalReport> {
    if dataset.mode != Mode::Mq {
        return Err(Error::config("evaluate_mq needs a detection dataset"));
    }
    let annotations: Vec<_> = dataset.videos.iter().map(|v| v.annotation.clone()).collect();
    let mut report = metrics::average_map(preds, &annotations, dataset.classes, &eval.thresholds)?;
    report.recall_kx = Some(RecallKx {
        k: eval.recall_k,
        tiou: eval.recall_tiou,
        value: metrics::recall_at_kx(
            preds,
            &annotations,
            dataset.classes,
            eval.recall_k,
            eval.recall_tiou,
        ),
    });
    Ok(report)
}

/// Grounding report: Recall@k over every configured (k, tIoU) pair.
pub fn evaluate_nlq(
    preds: &[SegmentPrediction],
    dataset: &Dataset,
    eval: &EvalSettings,
) -> Result<EvalReport> {
    if dataset.mode != Mode::Nlq {
        return Err(Error::config("evaluate_nlq needs a grounding dataset"));
    }
    let query_gt: Vec<(String, TimeSegment)> = dataset
        .videos
        .iter()
        .flat_map(|v| v.queries.iter().map(|q| (q.id.clone(), q.segment)))
        .collect();
    if query_gt.is_empty() {
        return Err(Error::data("dataset has no queries to evaluate"));
    }
    let mut report = EvalReport::default();
    for &k in &eval.query_ks {
        for &t in &eval.query_tious {
            report.query_recalls.push(QueryRecall {
                k,
                tiou: t,
                value: metrics::recall_at_k_queries(preds, &query_gt, k, t),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::run_config::{RunConfig, SynthSettings};
    use crate::data::{load_dataset, synth_generate};
    use crate::network::ModelConfig;

    fn mq_setup(dir: &std::path::Path) -> (Dataset, Model, DecodeConfig) {
        let s = SynthSettings {
            seed: 9,
            videos: 3,
            val_videos: 1,
            frames: 32,
            dim: 8,
            classes: 3,
            instances_per_video: 2,
            ..SynthSettings::default()
        };
        let out = synth_generate(&s, Mode::Mq, dir).unwrap();
        let ds = load_dataset(&out.train_manifest).unwrap();
        let cfg = ModelConfig {
            classes: 3,
            source_dims: vec![8],
            proj_dims: vec![16],
            embed_dim: 16,
            heads: 2,
            depth: 1,
            levels: 2,
            head_convs: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 1).unwrap();
        let mut rc = RunConfig::default();
        rc.model.mode = Mode::Mq;
        let decode = DecodeConfig {
            score_floor: 0.001,
            ..rc.resolved_decode()
        };
        (ds, model, decode)
    }

    #[test]
    fn predict_and_evaluate_mq_produce_valid_report() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, model, decode) = mq_setup(dir.path());
        let preds = predict_mq(std::slice::from_ref(&model), &ds, &decode).unwrap();
        let eval = EvalSettings::default();
        let report = evaluate_mq(&preds, &ds, &eval).unwrap();
        assert!(report.average_map >= 0.0 && report.average_map <= 1.0);
        assert!(report.recall_kx.is_some());
    }

    #[test]
    fn identical_ensemble_matches_single_model() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, model, decode) = mq_setup(dir.path());
        let single = predict_mq(std::slice::from_ref(&model), &ds, &decode).unwrap();
        let model_b = {
            // Same seed, same config: bit-identical parameters.
            Model::new(model.config().clone(), 1).unwrap()
        };
        let tripled = predict_mq(
            &[
                Model::new(model.config().clone(), 1).unwrap(),
                model_b,
                model,
            ],
            &ds,
            &decode,
        )
        .unwrap();
        assert_eq!(single.len(), tripled.len());
        for (a, b) in single.iter().zip(&tripled) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.segment, b.segment);
        }
    }

    #[test]
    fn mismatched_ensemble_configs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, model, decode) = mq_setup(dir.path());
        let mut other_cfg = model.config().clone();
        other_cfg.depth = 2;
        let other = Model::new(other_cfg, 1).unwrap();
        assert!(predict_mq(&[model, other], &ds, &decode).is_err());
    }

    #[test]
    fn nlq_predictions_cap_at_five_and_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let s = SynthSettings {
            seed: 2,
            videos: 2,
            val_videos: 1,
            frames: 32,
            dim: 8,
            classes: 3,
            queries_per_video: 2,
            text_tokens: 3,
            text_dim: 4,
            ..SynthSettings::default()
        };
        let out = synth_generate(&s, Mode::Nlq, dir.path()).unwrap();
        let ds = load_dataset(&out.train_manifest).unwrap();
        let cfg = ModelConfig {
            mode: Mode::Nlq,
            classes: 1,
            source_dims: vec![8],
            proj_dims: vec![16],
            embed_dim: 16,
            heads: 2,
            depth: 1,
            levels: 2,
            head_convs: 1,
            text_dim: 4,
            text_layers: 1,
            fuse_layers: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 3).unwrap();
        let mut rc = RunConfig::default();
        rc.model.mode = Mode::Nlq;
        rc.model.classes = 1;
        let mut decode = rc.resolved_decode();
        decode.score_floor = 0.0001;
        assert_eq!(decode.max_keep, 5);
        let preds = predict_nlq(std::slice::from_ref(&model), &ds, &decode).unwrap();
        // Per query at most five predictions.
        let mut counts = std::collections::BTreeMap::new();
        for p in &preds {
            *counts.entry(p.video_id.clone()).or_insert(0usize) += 1;
        }
        assert!(counts.values().all(|&c| c <= 5));
        let report = evaluate_nlq(&preds, &ds, &EvalSettings::default()).unwrap();
        assert_eq!(report.query_recalls.len(), 4);
        // R@5 >= R@1 at matching thresholds.
        let get = |k: usize, t: f64| {
            report
                .query_recalls
                .iter()
                .find(|q| q.k == k && (q.tiou - t).abs() < 1e-12)
                .unwrap()
                .value
        };
        assert!(get(5, 0.5) >= get(1, 0.5));
        assert!(get(5, 0.3) >= get(1, 0.3));
    }
}
