//! Temporal segments, labeled action instances and per-video annotations.
//!
//! Time is continuous seconds everywhere; feature-grid indices convert
//! through `stride_seconds` at the boundaries of the system.

use crate::error::{Error, Result};

/// A closed time interval `[start, end]` in seconds with positive duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSegment {
    start: f64,
    end: f64,
}

impl TimeSegment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::invalid(format!(
                "segment bounds must be finite, got [{start}, {end}]"
            )));
        }
        if start < 0.0 {
            return Err(Error::invalid(format!(
                "segment start must be >= 0, got {start}"
            )));
        }
        if end <= start {
            return Err(Error::invalid(format!(
                "segment must have positive duration, got [{start}, {end}]"
            )));
        }
        Ok(TimeSegment { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    /// Clips the segment to `[0, limit]`, returning `None` if nothing is left.
    pub fn clipped(&self, limit: f64) -> Option<TimeSegment> {
        let s = self.start.max(0.0);
        let e = self.end.min(limit);
        if e > s {
            Some(TimeSegment { start: s, end: e })
        } else {
            None
        }
    }
}

/// Temporal intersection-over-union of two segments.
///
/// Symmetric, 1 for identical segments, 0 for disjoint ones.
pub fn tiou(a: &TimeSegment, b: &TimeSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.duration() + b.duration() - inter;
    inter / union
}

/// A ground-truth action: a segment plus its category index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub segment: TimeSegment,
    pub label: usize,
}

impl ActionInstance {
    pub fn new(segment: TimeSegment, label: usize) -> Self {
        ActionInstance { segment, label }
    }
}

/// All ground truth for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration: f64,
    pub instances: Vec<ActionInstance>,
}

impl VideoAnnotation {
    /// Validates that every instance lies inside `[0, duration]` and that
    /// labels fit the class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::data(format!(
                "video {}: duration must be positive, got {}",
                self.video_id, self.duration
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.segment.end() > self.duration + 1e-9 {
                return Err(Error::data(format!(
                    "video {}: instance {} ends at {} beyond duration {}",
                    self.video_id,
                    i,
                    inst.segment.end(),
                    self.duration
                )));
            }
            if inst.label >= classes {
                return Err(Error::data(format!(
                    "video {}: instance {} has label {} but only {} classes",
                    self.video_id, i, inst.label, classes
                )));
            }
        }
        Ok(())
    }
}

/// A per-video feature track: `frames` rows of `dim` channels, each row
/// covering `stride_seconds` of video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub frames: usize,
    pub dim: usize,
    pub stride_seconds: f64,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        frames: usize,
        dim: usize,
        stride_seconds: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "feature sequence must be non-empty, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::invalid(format!(
                "feature sequence expects {} values for {}x{}, got {}",
                frames * dim,
                frames,
                dim,
                data.len()
            )));
        }
        if !(stride_seconds.is_finite() && stride_seconds > 0.0) {
            return Err(Error::invalid(format!(
                "stride_seconds must be positive, got {stride_seconds}"
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "feature sequence contains non-finite value at flat index {bad}"
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            frames,
            dim,
            stride_seconds,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}
