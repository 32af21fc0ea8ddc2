//! Multiscale point grid and frame-to-target assignment.
//!
//! The detector is anchor-free: every pyramid point predicts a class score
//! and two boundary offsets. Assignment decides which points are positive
//! for which ground-truth instance.

use crate::error::{Error, Result};
use crate::geom::VideoAnnotation;

/// One location on the multiscale grid.
///
/// Level `l` keeps every `2^l`-th feature position. `range_min..=range_max`
/// is the band of boundary offsets (in seconds) this level is responsible
/// for; consecutive levels tile `[0, inf)` without gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidPoint {
    pub t_center: f64,
    pub level: usize,
    pub stride: usize,
    pub range_min: f64,
    pub range_max: f64,
}

/// Number of points level `l` contributes for a sequence of `frames` steps.
pub fn level_len(frames: usize, level: usize) -> usize {
    let s = 1usize << level;
    frames.div_ceil(s)
}

/// Builds the pyramid point list for a `frames`-step feature grid.
///
/// Point order is level-major: all of level 0 in time order, then level 1,
/// and so on. Dense model outputs follow the same order.
pub fn build_pyramid(frames: usize, levels: usize, stride_seconds: f64) -> Result<Vec<PyramidPoint>> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if frames < (1usize << (levels - 1)) {
        return Err(Error::invalid(format!(
            "pyramid with {levels} levels needs at least {} frames, got {frames}",
            1usize << (levels - 1)
        )));
    }
    if !(stride_seconds.is_finite() && stride_seconds > 0.0) {
        return Err(Error::invalid(format!(
            "stride_seconds must be positive, got {stride_seconds}"
        )));
    }
    let mut points = Vec::with_capacity(2 * frames);
    for level in 0..levels {
        let stride = 1usize << level;
        let range_min = if level == 0 {
            0.0
        } else {
            (1usize << (level + 1)) as f64 * stride_seconds
        };
        let range_max = if level == levels - 1 {
            f64::INFINITY
        } else {
            (1usize << (level + 2)) as f64 * stride_seconds
        };
        for i in 0..level_len(frames, level) {
            points.push(PyramidPoint {
                t_center: ((i * stride) as f64 + 0.5) * stride_seconds,
                level,
                stride,
                range_min,
                range_max,
            });
        }
    }
    Ok(points)
}

/// Per-point training targets produced by [`assign_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointTargets {
    /// Class of the matched instance; `None` for background points.
    pub class_target: Vec<Option<usize>>,
    /// `(d_start, d_end)` in seconds; meaningful only where `in_mask` holds.
    pub offsets: Vec<[f64; 2]>,
    /// Index of the matched instance in the annotation.
    pub instance: Vec<Option<usize>>,
    pub in_mask: Vec<bool>,
    pub bg_mask: Vec<bool>,
    pub n_pos: usize,
}

impl PointTargets {
    /// Positive point indices grouped by matched instance, in instance order.
    /// Instances with no positive point are omitted.
    pub fn positives_by_instance(&self) -> Vec<(usize, Vec<usize>)> {
        let max_inst = self.instance.iter().flatten().copied().max();
        let Some(max_inst) = max_inst else {
            return Vec::new();
        };
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); max_inst + 1];
        for (p, inst) in self.instance.iter().enumerate() {
            if let Some(i) = inst {
                groups[*i].push(p);
            }
        }
        groups
            .into_iter()
            .enumerate()
            .filter(|(_, pts)| !pts.is_empty())
            .collect()
    }
}

/// Matches pyramid points against ground truth.
///
/// A point is positive for an instance when its center lies inside the
/// instance and its larger boundary offset falls inside the level's range
/// band. Among several matching instances the shortest wins, so fine
/// instances are not shadowed by enclosing ones.
pub fn assign_labels(points: &[PyramidPoint], annotation: &VideoAnnotation) -> PointTargets {
    let n = points.len();
    let mut class_target = vec![None; n];
    let mut offsets = vec![[0.0, 0.0]; n];
    let mut instance = vec![None; n];
    let mut in_mask = vec![false; n];
    let mut bg_mask = vec![true; n];
    let mut n_pos = 0usize;

    for (p, point) in points.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, inst) in annotation.instances.iter().enumerate() {
            let seg = inst.segment;
            if !seg.contains(point.t_center) {
                continue;
            }
            let d_start = point.t_center - seg.start();
            let d_end = seg.end() - point.t_center;
            let reach = d_start.max(d_end);
            if reach < point.range_min || reach > point.range_max {
                continue;
            }
            let dur = seg.duration();
            match best {
                Some((_, best_dur)) if best_dur <= dur => {}
                _ => best = Some((gi, dur)),
            }
        }
        if let Some((gi, _)) = best {
            let seg = annotation.instances[gi].segment;
            class_target[p] = Some(annotation.instances[gi].label);
            offsets[p] = [point.t_center - seg.start(), seg.end() - point.t_center];
            instance[p] = Some(gi);
            in_mask[p] = true;
            bg_mask[p] = false;
            n_pos += 1;
        }
    }

    PointTargets {
        class_target,
        offsets,
        instance,
        in_mask,
        bg_mask,
        n_pos,
    }
}
