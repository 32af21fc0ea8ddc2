//! Training objectives: sensitivity-weighted focal classification,
//! sensitivity-weighted 1D DIoU localization, and the frame/query InfoNCE
//! contrastive term.
//!
//! Both weighted losses divide by the number of positive points. Weights
//! come in per-instance groups so the mean-1 normalization from the
//! sensitivity module stays visible at the call site.

use crate::autodiff::params::BoundParams;
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geom::VideoAnnotation;
use crate::pyramid::{PointTargets, PyramidPoint};
use crate::sensitivity::{normalized_position, SensitivityParams, SubTask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub nce_temperature: f64,
    pub lambda_loc: f64,
    pub lambda_nce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            nce_temperature: 0.07,
            lambda_loc: 1.0,
            lambda_nce: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::config(format!(
                "focal_alpha must be in (0,1), got {}",
                self.focal_alpha
            )));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if self.nce_temperature <= 0.0 {
            return Err(Error::config(format!(
                "nce_temperature must be > 0, got {}",
                self.nce_temperature
            )));
        }
        Ok(())
    }
}

/// One positive-point group: `(instance index, point indices, mean-1 weights)`.
/// Point indices and weight entries are parallel.
pub type WeightGroup<'g> = (usize, Vec<usize>, Var<'g>);

/// Builds the per-instance sensitivity weight groups for one video.
pub fn instance_weight_groups<'g>(
    tape: &'g Tape,
    bound: &BoundParams<'g>,
    sens: &SensitivityParams,
    task: SubTask,
    points: &[PyramidPoint],
    targets: &PointTargets,
    annotation: &VideoAnnotation,
) -> Result<Vec<WeightGroup<'g>>> {
    let mut groups = Vec::new();
    for (inst_idx, point_idxs) in targets.positives_by_instance() {
        let inst = &annotation.instances[inst_idx];
        let positions: Vec<f64> = point_idxs
            .iter()
            .map(|&p| normalized_position(&points[p], inst))
            .collect::<Result<_>>()?;
        let h = sens.instance_weights(tape, bound, task, inst.label, &positions)?;
        groups.push((inst_idx, point_idxs, h));
    }
    Ok(groups)
}

/// One-hot class targets, all-zero rows for background points.
pub fn one_hot_targets(targets: &PointTargets, classes: usize) -> Tensor {
    let n = targets.class_target.len();
    let mut out = Tensor::zeros(&[n, classes]);
    for (i, c) in targets.class_target.iter().enumerate() {
        if let Some(c) = c {
            out.data_mut()[i * classes + c] = 1.0;
        }
    }
    out
}

/// Elementwise focal term from raw logits, stabilized in logit space:
/// `y=1 -> -alpha (1-p)^gamma log p`, `y=0 -> -(1-alpha) p^gamma log(1-p)`.
pub fn focal_from_logits<'g>(
    tape: &'g Tape,
    logits: Var<'g>,
    labels: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Var<'g>> {
    let neg = logits.neg();
    let pos_term = neg
        .sigmoid()
        .pow_const(gamma)
        .mul(neg.softplus())?
        .scale(alpha);
    let neg_term = logits
        .sigmoid()
        .pow_const(gamma)
        .mul(logits.softplus())?
        .scale(1.0 - alpha);
    let y = tape.constant(labels.clone());
    let one_minus_y = tape.constant(labels.map(|v| 1.0 - v));
    y.mul(pos_term)?.add(one_minus_y.mul(neg_term)?)
}

/// Value-level focal term for a single probability; reference/reporting only.
pub fn focal_term(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Classification loss: positives weighted per instance, background
/// unweighted, everything divided by the positive count.
///
/// `n_pos_denominator` overrides the divisor when accumulating across a
/// batch; it defaults to `max(1, n_pos)` of this video. With `weights: None`
/// the objective is the plain unweighted focal loss.
pub fn weighted_cls_loss<'g>(
    tape: &'g Tape,
    cls_logits: Var<'g>,
    targets: &PointTargets,
    classes: usize,
    weights: Option<&[WeightGroup<'g>]>,
    cfg: &LossConfig,
    n_pos_denominator: Option<f64>,
) -> Result<Var<'g>> {
    let shape = cls_logits.shape();
    if shape != [targets.class_target.len(), classes] {
        return Err(Error::ShapeMismatch {
            op: "weighted_cls_loss",
            lhs: shape,
            rhs: vec![targets.class_target.len(), classes],
        });
    }
    let labels = one_hot_targets(targets, classes);
    let focal = focal_from_logits(tape, cls_logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
    let per_point = focal.sum_axis(1)?;

    let bg_mask = Tensor::from_vec(
        targets
            .bg_mask
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    );
    let mut total = per_point.mul(tape.constant(bg_mask))?.sum_all();

    match weights {
        Some(groups) => {
            for (_, point_idxs, h) in groups {
                let picked = per_point.gather_rows(point_idxs)?;
                total = total.add(picked.mul(*h)?.sum_all())?;
            }
        }
        None => {
            let in_mask = Tensor::from_vec(
                targets
                    .in_mask
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect(),
            );
            total = total.add(per_point.mul(tape.constant(in_mask))?.sum_all())?;
        }
    }

    let denom = n_pos_denominator.unwrap_or_else(|| targets.n_pos.max(1) as f64);
    Ok(total.scale(1.0 / denom))
}

/// Elementwise 1D DIoU over offset pairs: `1 - IoU + rho^2 / span^2` with
/// `rho` the center distance and `span` the enclosing length. Segments are
/// reconstructed around the shared point, which cancels out.
pub fn diou_elementwise<'g>(
    tape: &'g Tape,
    pred_offsets: Var<'g>,
    gt_offsets: &[[f64; 2]],
) -> Result<Var<'g>> {
    let n = gt_offsets.len();
    if pred_offsets.shape() != [n, 2] {
        return Err(Error::ShapeMismatch {
            op: "diou",
            lhs: pred_offsets.shape(),
            rhs: vec![n, 2],
        });
    }
    let ps = pred_offsets.slice(1, 0, 1)?.reshape(&[n])?.neg();
    let pe = pred_offsets.slice(1, 1, 1)?.reshape(&[n])?;
    let gs = tape.constant(Tensor::from_vec(gt_offsets.iter().map(|o| -o[0]).collect()));
    let ge = tape.constant(Tensor::from_vec(gt_offsets.iter().map(|o| o[1]).collect()));

    let inter = pe.min_elem(ge)?.sub(ps.max_elem(gs)?)?.relu();
    let len_p = pe.sub(ps)?;
    let len_g = ge.sub(gs)?;
    let union = len_p.add(len_g)?.sub(inter)?;
    let iou = inter.div(union)?;

    let span = pe.max_elem(ge)?.sub(ps.min_elem(gs)?)?;
    let center_p = pe.add(ps)?.scale(0.5);
    let center_g = ge.add(gs)?.scale(0.5);
    let rho = center_p.sub(center_g)?;
    let penalty = rho.mul(rho)?.div(span.mul(span)?)?;

    iou.neg().add_scalar(1.0).add(penalty)
}

/// Value-level 1D DIoU between explicit segments; reference/reporting only.
pub fn diou_value(ps: f64, pe: f64, gs: f64, ge: f64) -> f64 {
    let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
    let union = (pe - ps) + (ge - gs) - inter;
    let iou = inter / union;
    let span = pe.max(ge) - ps.min(gs);
    let rho = 0.5 * (pe + ps) - 0.5 * (ge + gs);
    1.0 - iou + (rho * rho) / (span * span)
}

/// Localization loss over positive points only, sensitivity-weighted and
/// divided by the positive count. Zero when the video has no positives.
pub fn weighted_loc_loss<'g>(
    tape: &'g Tape,
    loc_pred: Var<'g>,
    targets: &PointTargets,
    weights: Option<&[WeightGroup<'g>]>,
    n_pos_denominator: Option<f64>,
) -> Result<Var<'g>> {
    let n_points = targets.class_target.len();
    if loc_pred.shape() != [n_points, 2] {
        return Err(Error::ShapeMismatch {
            op: "weighted_loc_loss",
            lhs: loc_pred.shape(),
            rhs: vec![n_points, 2],
        });
    }
    if targets.n_pos == 0 {
        return Ok(tape.scalar(0.0));
    }

    let mut total: Option<Var<'g>> = None;
    let mut add_group = |idxs: &[usize], h: Option<Var<'g>>| -> Result<()> {
        let gt: Vec<[f64; 2]> = idxs.iter().map(|&p| targets.offsets[p]).collect();
        let pred = loc_pred.gather_rows(idxs)?;
        let d = diou_elementwise(tape, pred, &gt)?;
        let term = match h {
            Some(h) => d.mul(h)?.sum_all(),
            None => d.sum_all(),
        };
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
        Ok(())
    };

    match weights {
        Some(groups) => {
            for (_, idxs, h) in groups {
                add_group(idxs, Some(*h))?;
            }
        }
        None => {
            for (_, idxs) in targets.positives_by_instance() {
                add_group(&idxs, None)?;
            }
        }
    }

    let denom = n_pos_denominator.unwrap_or_else(|| targets.n_pos.max(1) as f64);
    Ok(total.unwrap_or_else(|| tape.scalar(0.0)).scale(1.0 / denom))
}

/// Why an InfoNCE term was skipped for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NceSkip {
    NoPositives,
    NoNegatives,
}

/// InfoNCE over cosine similarities between every frame feature and one
/// query feature: mean over positive frames of `-log softmax(s/tau)[i]`.
pub fn info_nce<'g>(
    frame_feats: Var<'g>,
    query_feat: Var<'g>,
    pos_mask: &[bool],
    temperature: f64,
) -> Result<std::result::Result<Var<'g>, NceSkip>> {
    let (t, dim) = {
        let s = frame_feats.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "info_nce",
                lhs: s,
                rhs: vec![0, 0],
            });
        }
        (s[0], s[1])
    };
    if query_feat.shape() != [dim] {
        return Err(Error::ShapeMismatch {
            op: "info_nce_query",
            lhs: query_feat.shape(),
            rhs: vec![dim],
        });
    }
    if pos_mask.len() != t {
        return Err(Error::invalid(format!(
            "info_nce: mask of {} for {} frames",
            pos_mask.len(),
            t
        )));
    }
    let pos_idx: Vec<usize> = (0..t).filter(|&i| pos_mask[i]).collect();
    if pos_idx.is_empty() {
        return Ok(Err(NceSkip::NoPositives));
    }
    if pos_idx.len() == t {
        return Ok(Err(NceSkip::NoNegatives));
    }

    let frame_norms = frame_feats
        .mul(frame_feats)?
        .sum_axis(1)?
        .add_scalar(1e-24)
        .sqrt();
    let frames_unit = frame_feats.div_col(frame_norms)?;
    let q2 = query_feat.mul(query_feat)?.sum_all().add_scalar(1e-24).sqrt();
    let query_unit = query_feat.div(q2.repeat(dim)?)?;
    let sims = frames_unit
        .matmul(query_unit.reshape(&[dim, 1])?)?
        .reshape(&[t])?;
    let z = sims.scale(1.0 / temperature);
    let lse = z.logsumexp();
    let pos_mean = z.gather_rows(&pos_idx)?.mean_all();
    Ok(Ok(lse.sub(pos_mean)?))
}
