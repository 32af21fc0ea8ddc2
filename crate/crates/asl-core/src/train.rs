//! Training: batched gradient accumulation over videos (detection) or
//! video/query pairs (grounding), Adam with warmup + cosine schedule, and
//! sensitivity clamping by projection after every step.
//!
//! Per-item losses are computed on independent tapes, possibly in parallel;
//! gradients are then accumulated in item order so results are
//! bit-reproducible regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::fdcheck;
use crate::autodiff::optim::{lr_multiplier, Adam, AdamConfig};
use crate::autodiff::params::BoundParams;
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::data::dataset::Dataset;
use crate::data::run_config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{ActionInstance, VideoAnnotation};
use crate::losses::{
    info_nce, instance_weight_groups, weighted_cls_loss, weighted_loc_loss, LossConfig, NceSkip,
};
use crate::network::{Mode, Model, VideoInput};
use crate::pyramid::{assign_labels, PointTargets, PyramidPoint};
use crate::sensitivity::SubTask;

/// One training item: a video (detection) or a video/query pair (grounding),
/// with its precomputed assignment.
struct Item {
    video: usize,
    query: Option<usize>,
    annotation: VideoAnnotation,
    targets: PointTargets,
    /// Level-0 frame positivity for the contrastive term.
    nce_mask: Option<Vec<bool>>,
}

/// Scalar summaries of one epoch, used for the training log.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub nce_loss: f64,
    pub lr_mult: f64,
    pub n_pos: usize,
    pub zero_pos_batches: usize,
    pub nce_skipped: usize,
    pub h_cls_mean: f64,
    pub h_cls_min: f64,
    pub h_cls_max: f64,
    pub h_loc_mean: f64,
    pub h_loc_min: f64,
    pub h_loc_max: f64,
    pub mu_cls: Vec<f64>,
    pub sigma_cls: Vec<f64>,
    pub mu_loc: Vec<f64>,
    pub sigma_loc: Vec<f64>,
}

impl EpochStats {
    pub fn render_line(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "epoch {} loss {:.6} cls {:.6} loc {:.6} nce {:.6} lr_mult {:.4} n_pos {} zero_pos {} nce_skip {} h_cls {:.4}/{:.4}/{:.4} h_loc {:.4}/{:.4}/{:.4} mu_cls {} sigma_cls {} mu_loc {} sigma_loc {}",
            self.epoch,
            self.total_loss,
            self.cls_loss,
            self.loc_loss,
            self.nce_loss,
            self.lr_mult,
            self.n_pos,
            self.zero_pos_batches,
            self.nce_skipped,
            self.h_cls_min,
            self.h_cls_mean,
            self.h_cls_max,
            self.h_loc_min,
            self.h_loc_mean,
            self.h_loc_max,
            list(&self.mu_cls),
            list(&self.sigma_cls),
            list(&self.mu_loc),
            list(&self.sigma_loc),
        )
    }
}

#[derive(Debug, Clone, Default)]
struct HStats {
    sum: f64,
    count: usize,
    min: f64,
    max: f64,
}

impl HStats {
    fn new() -> Self {
        HStats {
            sum: 0.0,
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn absorb_values(&mut self, values: &[f64]) {
        for &v in values {
            self.sum += v;
            self.count += 1;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn merge(&mut self, other: &HStats) {
        self.sum += other.sum;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    fn summary(&self) -> (f64, f64, f64) {
        if self.count == 0 {
            (1.0, 1.0, 1.0)
        } else {
            (self.min, self.sum / self.count as f64, self.max)
        }
    }
}

struct ItemEval {
    grads: Vec<Option<Tensor>>,
    cls: f64,
    loc: f64,
    nce: f64,
    nce_skipped: bool,
    h_cls: HStats,
    h_loc: HStats,
}

/// Scaled multi-term objective for one item on one tape.
///
/// `w_cls`/`w_loc` fold the batch positive-count denominators in, `w_nce`
/// the batch query count; sums accumulate correctly across items.
#[allow(clippy::too_many_arguments)]
fn item_objective<'g>(
    model: &Model,
    tape: &'g Tape,
    bound: &BoundParams<'g>,
    input: &VideoInput,
    text: Option<&Tensor>,
    item: &Item,
    points: &[PyramidPoint],
    loss_cfg: &LossConfig,
    weights: (f64, f64, f64),
) -> Result<(Var<'g>, ItemEval)> {
    let (w_cls, w_loc, w_nce) = weights;
    let out = model.forward(tape, bound, input, text)?;
    let classes = model.config().classes;

    let use_h = model.config().learn_sensitivity;
    let (g_cls, g_loc) = if use_h {
        let g_cls = instance_weight_groups(
            tape,
            bound,
            model.sensitivity(),
            SubTask::Classification,
            points,
            &item.targets,
            &item.annotation,
        )?;
        let g_loc = instance_weight_groups(
            tape,
            bound,
            model.sensitivity(),
            SubTask::Localization,
            points,
            &item.targets,
            &item.annotation,
        )?;
        (Some(g_cls), Some(g_loc))
    } else {
        (None, None)
    };

    let mut h_cls = HStats::new();
    let mut h_loc = HStats::new();
    if let Some(groups) = &g_cls {
        for (_, _, h) in groups {
            h_cls.absorb_values(h.value().data());
        }
    }
    if let Some(groups) = &g_loc {
        for (_, _, h) in groups {
            h_loc.absorb_values(h.value().data());
        }
    }

    // Sum-form losses: denominator 1, scaled by the batch weights below.
    let cls_sum = weighted_cls_loss(
        tape,
        out.cls,
        &item.targets,
        classes,
        g_cls.as_deref(),
        loss_cfg,
        Some(1.0),
    )?;
    let loc_sum = weighted_loc_loss(tape, out.loc, &item.targets, g_loc.as_deref(), Some(1.0))?;

    let mut total = cls_sum.scale(w_cls).add(loc_sum.scale(w_loc * loss_cfg.lambda_loc))?;
    let mut nce_value = 0.0;
    let mut nce_skipped = false;
    if model.config().mode == Mode::Nlq {
        let frames = out.fused_frames.expect("nlq forward yields frames");
        let query = out.query_feat.expect("nlq forward yields query");
        let mask = item.nce_mask.as_ref().expect("nlq item has nce mask");
        match info_nce(frames, query, mask, loss_cfg.nce_temperature)? {
            Ok(nce) => {
                nce_value = nce.scalar_value()?;
                total = total.add(nce.scale(w_nce * loss_cfg.lambda_nce))?;
            }
            Err(NceSkip::NoPositives | NceSkip::NoNegatives) => {
                nce_skipped = true;
            }
        }
    }

    let eval = ItemEval {
        grads: Vec::new(),
        cls: cls_sum.scalar_value()?,
        loc: loc_sum.scalar_value()?,
        nce: nce_value,
        nce_skipped,
        h_cls,
        h_loc,
    };
    Ok((total, eval))
}

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
}

/// Builds the item list with cached assignments.
fn build_items(
    model: &Model,
    dataset: &Dataset,
    points: &[Vec<PyramidPoint>],
) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    match model.config().mode {
        Mode::Mq => {
            for (vi, video) in dataset.videos.iter().enumerate() {
                let targets = assign_labels(&points[vi], &video.annotation);
                items.push(Item {
                    video: vi,
                    query: None,
                    annotation: video.annotation.clone(),
                    targets,
                    nce_mask: None,
                });
            }
        }
        Mode::Nlq => {
            for (vi, video) in dataset.videos.iter().enumerate() {
                let frames = video.input.frames();
                let stride = video.input.stride_seconds;
                for (qi, q) in video.queries.iter().enumerate() {
                    let annotation = VideoAnnotation {
                        video_id: q.id.clone(),
                        duration: video.annotation.duration,
                        instances: vec![ActionInstance::new(q.segment, 0)],
                    };
                    let targets = assign_labels(&points[vi], &annotation);
                    let nce_mask: Vec<bool> = (0..frames)
                        .map(|t| q.segment.contains((t as f64 + 0.5) * stride))
                        .collect();
                    items.push(Item {
                        video: vi,
                        query: Some(qi),
                        annotation,
                        targets,
                        nce_mask: Some(nce_mask),
                    });
                }
            }
        }
    }
    if items.is_empty() {
        return Err(Error::data("training set has no items"));
    }
    Ok(items)
}

fn check_dataset_compat(model: &Model, dataset: &Dataset) -> Result<()> {
    if dataset.mode != model.config().mode {
        return Err(Error::config(format!(
            "dataset mode {} does not match model mode {}",
            dataset.mode.as_str(),
            model.config().mode.as_str()
        )));
    }
    let classes = match dataset.mode {
        Mode::Mq => dataset.classes,
        Mode::Nlq => 1,
    };
    if classes != model.config().classes {
        return Err(Error::config(format!(
            "dataset has {classes} classes, model {}",
            model.config().classes
        )));
    }
    Ok(())
}

/// Trains a fresh model on the dataset. `on_epoch` fires after each epoch
/// with the running model (for logging and periodic checkpoints).
pub fn train_model(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    check_dataset_compat(&model, dataset)?;

    let points: Vec<Vec<PyramidPoint>> = dataset
        .videos
        .iter()
        .map(|v| {
            model.pyramid_points(v.input.frames(), v.input.stride_seconds)
        })
        .collect::<Result<_>>()?;
    let items = build_items(&model, dataset, &points)?;

    let steps_per_epoch = items.len().div_ceil(cfg.train.batch) as u64;
    let total_steps = steps_per_epoch * cfg.train.epochs as u64;
    let warmup_steps = (cfg.train.warmup_epochs * steps_per_epoch as f64).round() as u64;

    let mut optimizer = Adam::new(
        AdamConfig {
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let sens_params = model.sensitivity().clone();
    for id in [
        sens_params.mu_cls,
        sens_params.sigma_cls,
        sens_params.mu_loc,
        sens_params.sigma_loc,
    ] {
        model
            .params_mut()
            .set_lr_scale(id, cfg.train.sensitivity_lr_mult);
    }

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut step_index = 0u64;

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.train
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut ep = EpochStats {
            epoch,
            total_loss: 0.0,
            cls_loss: 0.0,
            loc_loss: 0.0,
            nce_loss: 0.0,
            lr_mult: 0.0,
            n_pos: 0,
            zero_pos_batches: 0,
            nce_skipped: 0,
            h_cls_mean: 1.0,
            h_cls_min: 1.0,
            h_cls_max: 1.0,
            h_loc_mean: 1.0,
            h_loc_min: 1.0,
            h_loc_max: 1.0,
            mu_cls: Vec::new(),
            sigma_cls: Vec::new(),
            mu_loc: Vec::new(),
            sigma_loc: Vec::new(),
        };
        let mut h_cls_epoch = HStats::new();
        let mut h_loc_epoch = HStats::new();
        let mut batch_count = 0usize;

        for chunk in order.chunks(cfg.train.batch) {
            let n_pos_batch: usize = chunk.iter().map(|&i| items[i].targets.n_pos).sum();
            if n_pos_batch == 0 {
                ep.zero_pos_batches += 1;
            }
            let denom = n_pos_batch.max(1) as f64;
            let nce_items = chunk
                .iter()
                .filter(|&&i| {
                    items[i]
                        .nce_mask
                        .as_ref()
                        .map_or(false, |m| m.iter().any(|&b| b) && !m.iter().all(|&b| b))
                })
                .count()
                .max(1) as f64;
            let weights = (1.0 / denom, 1.0 / denom, 1.0 / nce_items);

            let lr_mult = lr_multiplier(step_index, total_steps, warmup_steps);
            ep.lr_mult = lr_mult;

            let evals: Vec<Result<ItemEval>> = chunk
                .par_iter()
                .map(|&idx| {
                    let item = &items[idx];
                    let video = &dataset.videos[item.video];
                    let text = item
                        .query
                        .map(|qi| video.queries[qi].tokens.clone());
                    let tape = Tape::new();
                    let bound = model.params().bind(&tape);
                    let (total, mut eval) = item_objective(
                        &model,
                        &tape,
                        &bound,
                        &video.input,
                        text.as_ref(),
                        item,
                        &points[item.video],
                        &cfg.loss,
                        weights,
                    )?;
                    let grads = tape.backward(total)?;
                    eval.grads = model.params().collect_grads(&bound, &grads);
                    Ok(eval)
                })
                .collect();

            // Deterministic accumulation in chunk order.
            let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
            let mut batch_cls = 0.0;
            let mut batch_loc = 0.0;
            let mut batch_nce = 0.0;
            for ev in evals {
                let ev = ev?;
                for (slot, g) in acc.iter_mut().zip(ev.grads) {
                    match (slot.as_mut(), g) {
                        (Some(s), Some(g)) => s.add_assign(&g),
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
                batch_cls += ev.cls;
                batch_loc += ev.loc;
                batch_nce += ev.nce;
                if ev.nce_skipped {
                    ep.nce_skipped += 1;
                }
                h_cls_epoch.merge(&ev.h_cls);
                h_loc_epoch.merge(&ev.h_loc);
            }

            optimizer.step(model.params_mut(), &acc, lr_mult)?;
            sens_params.project(model.params_mut());
            step_index += 1;
            batch_count += 1;

            ep.cls_loss += batch_cls / denom;
            ep.loc_loss += batch_loc / denom * cfg.loss.lambda_loc;
            ep.nce_loss += batch_nce / nce_items * cfg.loss.lambda_nce;
            ep.n_pos += n_pos_batch;
        }

        let b = batch_count.max(1) as f64;
        ep.cls_loss /= b;
        ep.loc_loss /= b;
        ep.nce_loss /= b;
        ep.total_loss = ep.cls_loss + ep.loc_loss + ep.nce_loss;
        (ep.h_cls_min, ep.h_cls_mean, ep.h_cls_max) = h_cls_epoch.summary();
        (ep.h_loc_min, ep.h_loc_mean, ep.h_loc_max) = h_loc_epoch.summary();
        let sens = model.sensitivity();
        ep.mu_cls = sens.mu_values(model.params(), SubTask::Classification);
        ep.sigma_cls = sens.sigma_values(model.params(), SubTask::Classification);
        ep.mu_loc = sens.mu_values(model.params(), SubTask::Localization);
        ep.sigma_loc = sens.sigma_values(model.params(), SubTask::Localization);

        on_epoch(&ep, &model)?;
        epochs.push(ep);
    }

    Ok(TrainOutcome { model, epochs })
}

/// Worst finite-difference agreement error over `samples` sampled
/// parameters (the four sensitivity tensors always included) for the full
/// training objective of a small in-memory batch.
pub fn end_to_end_gradcheck(mode: Mode, seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = if mode == Mode::Nlq { 1 } else { 3 };
    let model_cfg = crate::network::ModelConfig {
        mode,
        classes,
        source_dims: vec![5],
        proj_dims: vec![12],
        embed_dim: 12,
        heads: 2,
        depth: 1,
        levels: 2,
        head_convs: 1,
        head_kernel: 3,
        ffn_mult: 2,
        text_dim: 4,
        text_layers: 1,
        fuse_layers: 1,
        // Narrow Gaussians so mu/sigma gradients are well excited.
        sigma_init: 0.4,
        ..crate::network::ModelConfig::default()
    };
    let model = Model::new(model_cfg, seed)?;

    let frames = 10usize;
    let input = VideoInput {
        sources: vec![Tensor::randn(&[frames, 5], 0.8, &mut rng)],
        stride_seconds: 1.0,
    };
    let text = if mode == Mode::Nlq {
        Some(Tensor::randn(&[3, 4], 0.8, &mut rng))
    } else {
        None
    };
    let annotation = VideoAnnotation {
        video_id: "g".into(),
        duration: frames as f64,
        instances: match mode {
            Mode::Mq => vec![
                ActionInstance::new(crate::geom::TimeSegment::new(1.0, 5.0)?, 1),
                ActionInstance::new(crate::geom::TimeSegment::new(6.0, 9.0)?, 0),
            ],
            Mode::Nlq => vec![ActionInstance::new(
                crate::geom::TimeSegment::new(2.0, 7.0)?,
                0,
            )],
        },
    };
    let points = model.pyramid_points(frames, 1.0)?;
    let targets = assign_labels(&points, &annotation);
    let nce_mask: Option<Vec<bool>> = (mode == Mode::Nlq).then(|| {
        (0..frames)
            .map(|t| annotation.instances[0].segment.contains(t as f64 + 0.5))
            .collect()
    });
    let item = Item {
        video: 0,
        query: None,
        annotation,
        targets,
        nce_mask,
    };
    let loss_cfg = LossConfig::default();

    let param_tensors: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, e)| e.value.clone())
        .collect();

    let model_ref = &model;
    let input_ref = &input;
    let item_ref = &item;
    let points_ref = &points;
    let text_ref = text.as_ref();
    let f = fdcheck::as_scalar_fn(move |tape, vars| {
        let bound = BoundParams::from_vars(vars.to_vec());
        let n_pos = item_ref.targets.n_pos.max(1) as f64;
        let (total, _) = item_objective(
            model_ref,
            tape,
            &bound,
            input_ref,
            text_ref,
            item_ref,
            points_ref,
            &loss_cfg,
            (1.0 / n_pos, 1.0 / n_pos, 1.0),
        )?;
        Ok(total)
    });

    // Sample coordinates: all sensitivity entries plus random weights.
    let n_params = param_tensors.len();
    let sens_start = n_params - 4;
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for p in sens_start..n_params {
        for j in 0..param_tensors[p].numel() {
            coords.push((p, j));
        }
    }
    while coords.len() < samples {
        let p = rng.gen_range(0..sens_start);
        let j = rng.gen_range(0..param_tensors[p].numel());
        coords.push((p, j));
    }

    fdcheck::spot_check_scalar_fn(&param_tensors, &coords, 1e-2, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::run_config::SynthSettings;
    use crate::data::{load_dataset, synth_generate};

    fn small_mq_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.classes = 3;
        cfg.model.source_dims = vec![8];
        cfg.model.proj_dims = vec![16];
        cfg.model.embed_dim = 16;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg.model.levels = 2;
        cfg.model.head_convs = 1;
        cfg.train.epochs = 2;
        cfg.train.batch = 2;
        cfg
    }

    fn small_dataset(dir: &std::path::Path, mode: Mode) -> Dataset {
        let s = SynthSettings {
            seed: 5,
            videos: 4,
            val_videos: 1,
            frames: 32,
            dim: 8,
            classes: 3,
            instances_per_video: 2,
            queries_per_video: 2,
            text_tokens: 3,
            text_dim: 4,
            ..SynthSettings::default()
        };
        let out = synth_generate(&s, mode, dir).unwrap();
        load_dataset(&out.train_manifest).unwrap()
    }

    #[test]
    fn mq_training_runs_and_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), Mode::Mq);
        let mut cfg = small_mq_config();
        cfg.train.epochs = 6;
        cfg.train.warmup_epochs = 0.5;
        let outcome = train_model(&cfg, &ds, |_, _| Ok(())).unwrap();
        assert_eq!(outcome.epochs.len(), 6);
        let first = outcome.epochs.first().unwrap().total_loss;
        let last = outcome.epochs.last().unwrap().total_loss;
        assert!(last.is_finite() && first.is_finite());
        assert!(last < first, "loss did not go down: {first} -> {last}");
        // Sensitivity stays inside its clamps.
        for ep in &outcome.epochs {
            for &m in ep.mu_cls.iter().chain(&ep.mu_loc) {
                assert!((0.0..=1.0).contains(&m));
            }
            for &s in ep.sigma_cls.iter().chain(&ep.sigma_loc) {
                assert!((0.1..=8.0).contains(&s));
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), Mode::Mq);
        let cfg = small_mq_config();
        let run = || {
            let out = train_model(&cfg, &ds, |_, _| Ok(())).unwrap();
            let params: Vec<f64> = out
                .model
                .params()
                .iter()
                .flat_map(|(_, e)| e.value.data().to_vec())
                .collect();
            (params, out.epochs.last().unwrap().total_loss)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2, "parameters differ between identical runs");
        assert_eq!(l1, l2);
    }

    #[test]
    fn nlq_training_runs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), Mode::Nlq);
        let mut cfg = small_mq_config();
        cfg.model.mode = Mode::Nlq;
        cfg.model.classes = 1;
        cfg.model.text_dim = 4;
        cfg.model.text_layers = 1;
        cfg.model.fuse_layers = 1;
        let outcome = train_model(&cfg, &ds, |_, _| Ok(())).unwrap();
        assert!(outcome.epochs.iter().all(|e| e.total_loss.is_finite()));
        assert!(outcome.epochs.iter().any(|e| e.nce_loss != 0.0));
    }

    #[test]
    fn frozen_sensitivity_stays_at_init() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), Mode::Mq);
        let mut cfg = small_mq_config();
        cfg.model.learn_sensitivity = false;
        cfg.model.sigma_init = 8.0;
        let outcome = train_model(&cfg, &ds, |_, _| Ok(())).unwrap();
        let last = outcome.epochs.last().unwrap();
        assert!(last.mu_cls.iter().all(|&m| m == 0.5));
        assert!(last.sigma_cls.iter().all(|&s| s == 8.0));
        // With weights forced to 1 the h statistics stay unit.
        assert_eq!(last.h_cls_mean, 1.0);
    }

    #[test]
    fn learned_sensitivity_moves() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), Mode::Mq);
        let mut cfg = small_mq_config();
        cfg.train.epochs = 5;
        let outcome = train_model(&cfg, &ds, |_, _| Ok(())).unwrap();
        let last = outcome.epochs.last().unwrap();
        let moved = last
            .mu_cls
            .iter()
            .chain(&last.sigma_cls)
            .any(|&v| (v - 0.5).abs() > 1e-6 && (v - 2.0).abs() > 1e-6);
        assert!(moved, "sensitivity parameters never moved: {last:?}");
    }

    #[test]
    fn end_to_end_gradcheck_mq_and_nlq() {
        let err_mq = end_to_end_gradcheck(Mode::Mq, 11, 50).unwrap();
        assert!(err_mq < 1e-5, "mq end-to-end fd error {err_mq}");
        let err_nlq = end_to_end_gradcheck(Mode::Nlq, 12, 50).unwrap();
        assert!(err_nlq < 1e-5, "nlq end-to-end fd error {err_nlq}");
    }
}
