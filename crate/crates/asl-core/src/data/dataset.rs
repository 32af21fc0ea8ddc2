//! In-memory dataset assembled from a manifest plus its feature files.

use std::path::{Path, PathBuf};

use crate::autodiff::tensor::Tensor;
use crate::data::feature_file::read_feature_file;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::geom::{TimeSegment, VideoAnnotation};
use crate::network::{Mode, VideoInput};

#[derive(Debug, Clone)]
pub struct LoadedQuery {
    pub id: String,
    pub tokens: Tensor,
    pub segment: TimeSegment,
}

#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub annotation: VideoAnnotation,
    pub input: VideoInput,
    pub queries: Vec<LoadedQuery>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub mode: Mode,
    pub classes: usize,
    pub videos: Vec<LoadedVideo>,
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn total_queries(&self) -> usize {
        self.videos.iter().map(|v| v.queries.len()).sum()
    }
}

/// Loads every referenced file and cross-checks timing metadata.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate_files(&base)?;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for v in &manifest.videos {
        let mut sources = Vec::with_capacity(v.features.len());
        let mut frames: Option<usize> = None;
        for f in &v.features {
            let t = read_feature_file(&base.join(f))?;
            match frames {
                None => frames = Some(t.shape()[0]),
                Some(n) if n != t.shape()[0] => {
                    return Err(Error::data(format!(
                        "video {}: sources disagree on frame count ({n} vs {})",
                        v.id,
                        t.shape()[0]
                    )));
                }
                _ => {}
            }
            sources.push(t);
        }
        let frames = frames.expect("validated manifest has sources");
        let implied = frames as f64 * v.stride_seconds;
        if (implied - v.duration).abs() > v.stride_seconds + 1e-9 {
            return Err(Error::data(format!(
                "video {}: duration {} inconsistent with {} frames at stride {}",
                v.id, v.duration, frames, v.stride_seconds
            )));
        }

        let mut queries = Vec::with_capacity(v.queries.len());
        for q in &v.queries {
            let tokens = read_feature_file(&base.join(&q.embedding))?;
            queries.push(LoadedQuery {
                id: q.id.clone(),
                tokens,
                segment: q.segment,
            });
        }

        videos.push(LoadedVideo {
            annotation: VideoAnnotation {
                video_id: v.id.clone(),
                duration: v.duration,
                instances: v.instances.clone(),
            },
            input: VideoInput {
                sources,
                stride_seconds: v.stride_seconds,
            },
            queries,
        });
    }

    Ok(Dataset {
        mode: manifest.mode,
        classes: manifest.classes,
        videos,
        base_dir: base,
    })
}
