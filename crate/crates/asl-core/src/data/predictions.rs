//! Prediction files: one whitespace-separated record per line in the fixed
//! order `video_id label start_s end_s score`, scores printed as 6-decimal
//! fixed point.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::TimeSegment;
use crate::postprocess::SegmentPrediction;

pub fn render_predictions(preds: &[SegmentPrediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(
            s,
            "{} {} {:.6} {:.6} {:.6}",
            p.video_id,
            p.label,
            p.segment.start(),
            p.segment.end(),
            p.score
        );
    }
    s
}

pub fn save_predictions(preds: &[SegmentPrediction], path: &Path) -> Result<()> {
    std::fs::write(path, render_predictions(preds)).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<SegmentPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::data(format!(
                "{}: line {}: expected 5 fields, got {}",
                path.display(),
                ln + 1,
                parts.len()
            )));
        }
        let bad = |what: &str, val: &str| {
            Error::data(format!(
                "{}: line {}: bad {what} '{val}'",
                path.display(),
                ln + 1
            ))
        };
        let label: usize = parts[1].parse().map_err(|_| bad("label", parts[1]))?;
        let start: f64 = parts[2].parse().map_err(|_| bad("start", parts[2]))?;
        let end: f64 = parts[3].parse().map_err(|_| bad("end", parts[3]))?;
        let score: f64 = parts[4].parse().map_err(|_| bad("score", parts[4]))?;
        if !score.is_finite() {
            return Err(bad("score", parts[4]));
        }
        let segment =
            TimeSegment::new(start, end).map_err(|e| bad("segment", &format!("{e}")))?;
        out.push(SegmentPrediction {
            video_id: parts[0].to_string(),
            segment,
            label,
            score,
        });
    }
    Ok(out)
}
