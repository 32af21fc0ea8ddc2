//! Deterministic synthetic benchmark generator.
//!
//! Each action instance plants a class signature into the feature track over
//! its support. The signature amplitude peaks near a class-specific
//! "sensitive" position (drawn once per class from the seed) and falls to a
//! small floor elsewhere, while a shared class-agnostic presence vector
//! marks the whole support. Frames far from the sensitive region therefore
//! carry little class evidence, giving learned position weights a real
//! structure to recover. Grounding mode additionally emits per-query token
//! embeddings correlated with the planted signature.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::feature_file::write_feature_file;
use crate::data::manifest::{DatasetManifest, ManifestQuery, ManifestVideo};
use crate::data::run_config::SynthSettings;
use crate::error::{Error, Result};
use crate::geom::{ActionInstance, TimeSegment};
use crate::network::Mode;

/// Amplitude floor of the class signature inside an instance: every
/// in-support frame keeps at least this share of the signature, so the
/// classes stay linearly separable at zero noise.
pub const AMP_FLOOR: f64 = 0.25;

pub const TRUTH_HEADER: &str = "aslsensitivity 1";

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub truth: PathBuf,
}

/// Gram-Schmidt orthonormal basis of `count` random directions in `dim`.
fn orthonormal_basis(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        basis.push(v);
    }
    basis
}

/// Sensitive positions: evenly spread over [0.2, 0.8], assignment to classes
/// permuted and jittered from the seed.
fn sensitive_positions(classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut slots: Vec<f64> = (0..classes)
        .map(|i| {
            if classes == 1 {
                0.5
            } else {
                0.2 + 0.6 * i as f64 / (classes - 1) as f64
            }
        })
        .collect();
    // Fisher-Yates with the shared stream.
    for i in (1..slots.len()).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }
    for s in slots.iter_mut() {
        *s = (*s + rng.gen_range(-0.03..0.03)).clamp(0.05, 0.95);
    }
    slots
}

fn place_segments(
    frames: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let min_len = 4usize;
    let max_len = (frames / 5).max(min_len + 2);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let len = rng.gen_range(min_len..=max_len);
            if len >= frames {
                continue;
            }
            let start = rng.gen_range(0..=frames - len);
            let end = start + len;
            if placed.iter().all(|&(s, e)| end <= s || start >= e) {
                placed.push((start, end));
                break;
            }
        }
    }
    placed.sort_unstable();
    placed
}

struct World {
    signatures: Vec<Vec<f64>>,
    presence: Vec<f64>,
    positions: Vec<f64>,
    text_map: Vec<f64>, // [text_dim x dim], row-major
}

fn build_world(s: &SynthSettings, mode: Mode, rng: &mut ChaCha8Rng) -> World {
    let mut basis = orthonormal_basis(s.classes + 1, s.dim, rng);
    let presence = basis.remove(0);
    let positions = sensitive_positions(s.classes, rng);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let text_map: Vec<f64> = if mode == Mode::Nlq {
        (0..s.text_dim * s.dim)
            .map(|_| normal.sample(rng) / (s.dim as f64).sqrt())
            .collect()
    } else {
        Vec::new()
    };
    World {
        signatures: basis,
        presence,
        positions,
        text_map,
    }
}

#[allow(clippy::too_many_arguments)]
fn synth_video(
    s: &SynthSettings,
    mode: Mode,
    world: &World,
    video_id: &str,
    out_dir: &Path,
    manifest_videos: &mut Vec<ManifestVideo>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let frames = s.frames;
    let dim = s.dim;
    let mut data: Vec<f64> = (0..frames * dim)
        .map(|_| s.noise * normal.sample(rng))
        .collect();

    let count = match mode {
        Mode::Mq => s.instances_per_video,
        Mode::Nlq => s.queries_per_video,
    };
    let segments = place_segments(frames, count, rng);
    let classes: Vec<usize> = match mode {
        Mode::Mq => (0..segments.len())
            .map(|_| rng.gen_range(0..s.classes))
            .collect(),
        Mode::Nlq => {
            // Concepts unique per video so each query has one answer.
            let mut pool: Vec<usize> = (0..s.classes).collect();
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            pool.truncate(segments.len());
            pool
        }
    };

    for (&(start, end), &class) in segments.iter().zip(&classes) {
        let span = (end - start) as f64;
        for t in start..end {
            let pos = ((t - start) as f64 + 0.5) / span;
            let gauss = {
                let d = pos - world.positions[class];
                (-(d * d) / (2.0 * s.sensitive_width * s.sensitive_width)).exp()
            };
            let amp = AMP_FLOOR + (1.0 - AMP_FLOOR) * gauss;
            // Transitional frames far from the sensitive region carry weak
            // wrong-class evidence.
            let blur = s.confusion * (1.0 - gauss);
            let other = if s.classes > 1 {
                (class + rng.gen_range(1..s.classes)) % s.classes
            } else {
                class
            };
            let row = &mut data[t * dim..(t + 1) * dim];
            for (i, v) in row.iter_mut().enumerate() {
                *v += s.signal_scale * amp * world.signatures[class][i]
                    + s.presence_scale * world.presence[i];
                if s.classes > 1 {
                    *v += s.signal_scale * blur * world.signatures[other][i];
                }
            }
        }
    }

    let feature_rel = PathBuf::from(format!("features/{video_id}.aslf"));
    write_feature_file(&out_dir.join(&feature_rel), frames, dim, &data)?;

    let duration = frames as f64 * s.stride;
    let mut video = ManifestVideo {
        id: video_id.to_string(),
        duration,
        stride_seconds: s.stride,
        features: vec![feature_rel],
        instances: Vec::new(),
        queries: Vec::new(),
    };

    match mode {
        Mode::Mq => {
            for (&(start, end), &class) in segments.iter().zip(&classes) {
                let seg =
                    TimeSegment::new(start as f64 * s.stride, end as f64 * s.stride)?;
                video.instances.push(ActionInstance::new(seg, class));
            }
        }
        Mode::Nlq => {
            for (qi, (&(start, end), &class)) in segments.iter().zip(&classes).enumerate() {
                let qid = format!("{video_id}_q{qi}");
                // Tokens: projected signature plus per-token noise.
                let mut tokens = Vec::with_capacity(s.text_tokens * s.text_dim);
                for _ in 0..s.text_tokens {
                    for r in 0..s.text_dim {
                        let mut dot = 0.0;
                        for c in 0..dim {
                            dot += world.text_map[r * dim + c] * world.signatures[class][c];
                        }
                        tokens.push(dot + 0.1 * normal.sample(rng));
                    }
                }
                let emb_rel = PathBuf::from(format!("queries/{qid}.aslf"));
                write_feature_file(&out_dir.join(&emb_rel), s.text_tokens, s.text_dim, &tokens)?;
                let seg =
                    TimeSegment::new(start as f64 * s.stride, end as f64 * s.stride)?;
                video.queries.push(ManifestQuery {
                    id: qid,
                    embedding: emb_rel,
                    segment: seg,
                });
            }
        }
    }
    manifest_videos.push(video);
    Ok(())
}

/// Generates the dataset under `out_dir`: feature files, train/val
/// manifests and the planted sensitive-position truth file. Deterministic
/// for a fixed settings struct.
pub fn generate(s: &SynthSettings, mode: Mode, out_dir: &Path) -> Result<SynthOutput> {
    if s.dim < s.classes + 1 {
        return Err(Error::config(format!(
            "synth.dim ({}) must be at least classes+1 ({})",
            s.dim,
            s.classes + 1
        )));
    }
    if mode == Mode::Nlq && s.queries_per_video > s.classes {
        return Err(Error::config(format!(
            "synth.queries_per_video ({}) cannot exceed synth.classes ({})",
            s.queries_per_video, s.classes
        )));
    }
    std::fs::create_dir_all(out_dir.join("features"))
        .map_err(|e| Error::io(out_dir.join("features"), e))?;
    if mode == Mode::Nlq {
        std::fs::create_dir_all(out_dir.join("queries"))
            .map_err(|e| Error::io(out_dir.join("queries"), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let world = build_world(s, mode, &mut rng);

    let make_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<DatasetManifest> {
        let mut videos = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{prefix}{i:04}");
            synth_video(s, mode, &world, &id, out_dir, &mut videos, rng)?;
        }
        Ok(DatasetManifest {
            mode,
            classes: match mode {
                Mode::Mq => s.classes,
                Mode::Nlq => 1,
            },
            sources: vec!["synth".to_string()],
            videos,
        })
    };

    let train = make_split("tr", s.videos, &mut rng)?;
    let val = make_split("va", s.val_videos, &mut rng)?;

    let train_manifest = out_dir.join("train_manifest.txt");
    train.save(&train_manifest)?;
    let val_manifest = out_dir.join("val_manifest.txt");
    val.save(&val_manifest)?;

    let truth = out_dir.join("sensitivity_truth.txt");
    let mut t = String::new();
    t.push_str(TRUTH_HEADER);
    t.push('\n');
    for (c, p) in world.positions.iter().enumerate() {
        let _ = writeln!(t, "class {c} {p:.6}");
    }
    std::fs::write(&truth, t).map_err(|e| Error::io(&truth, e))?;

    Ok(SynthOutput {
        train_manifest,
        val_manifest,
        truth,
    })
}

/// Reads the planted sensitive positions back (index = class).
pub fn read_truth(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRUTH_HEADER) {
        return Err(Error::data(format!(
            "{}: missing '{TRUTH_HEADER}' header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (ln, raw) in lines.enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "class" {
            return Err(Error::data(format!(
                "{}: line {}: expected 'class <idx> <pos>'",
                path.display(),
                ln + 2
            )));
        }
        let idx: usize = parts[1]
            .parse()
            .map_err(|_| Error::data(format!("bad class index '{}'", parts[1])))?;
        if idx != out.len() {
            return Err(Error::data("truth classes out of order".to_string()));
        }
        out.push(
            parts[2]
                .parse()
                .map_err(|_| Error::data(format!("bad position '{}'", parts[2])))?,
        );
    }
    Ok(out)
}
