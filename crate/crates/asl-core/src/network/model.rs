//! The full detector: per-source projection, encoder, pyramid, dense heads,
//! and (in language-query mode) text encoding plus cross-attention fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{BoundParams, ParamStore};
use crate::autodiff::tape::{concat, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::network::config::{Mode, ModelConfig};
use crate::network::layers::{
    sinusoidal_encoding, ConvHead, CrossBlock, Downsample, EncoderBlock, SeqMask,
    SourceProjection, TextBlock,
};
use crate::pyramid::{build_pyramid, level_len, PyramidPoint};
use crate::sensitivity::SensitivityParams;

/// Classification head bias prior: sigmoid(bias) ~ 0.01 keeps early
/// background scores low.
const CLS_BIAS_INIT: f64 = -4.595119850134589;

/// One video's feature tracks, all sharing the frame count.
#[derive(Debug, Clone)]
pub struct VideoInput {
    pub sources: Vec<Tensor>,
    pub stride_seconds: f64,
}

impl VideoInput {
    pub fn frames(&self) -> usize {
        self.sources.first().map_or(0, |s| s.shape()[0])
    }
}

/// Dense per-point outputs in pyramid-point order (level-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    /// `[points, classes]` raw logits.
    pub cls: Tensor,
    /// `[points, 2]` positive boundary offsets in seconds.
    pub loc: Tensor,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput<'g> {
    pub cls: Var<'g>,
    pub loc: Var<'g>,
    /// Full-resolution fused frame features (valid rows only; NLQ).
    pub fused_frames: Option<Var<'g>>,
    /// Mean-pooled encoded text tokens (NLQ).
    pub query_feat: Option<Var<'g>>,
    /// Valid point count per pyramid level.
    pub level_valid: Vec<usize>,
}

struct TextEncoder {
    proj: crate::network::layers::Linear,
    blocks: Vec<TextBlock>,
}

struct Arch {
    proj: Vec<SourceProjection>,
    blocks: Vec<EncoderBlock>,
    downs: Vec<(Downsample, EncoderBlock)>,
    cls_head: ConvHead,
    loc_head: ConvHead,
    text: Option<TextEncoder>,
    fuse: Vec<CrossBlock>,
}

/// Detector with all learnable state in a [`ParamStore`].
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    sens: SensitivityParams,
    arch: Arch,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

impl Model {
    /// Builds and initializes a model; identical seeds give bit-identical
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let dim = config.embed_dim;

        let proj = config
            .source_dims
            .iter()
            .zip(&config.proj_dims)
            .enumerate()
            .map(|(i, (&d_in, &d_out))| {
                SourceProjection::init(&mut ps, &mut rng, &format!("proj{i}"), d_in, d_out)
            })
            .collect();

        let blocks = (0..config.depth)
            .map(|i| {
                EncoderBlock::init(
                    &mut ps,
                    &mut rng,
                    &format!("enc{i}"),
                    dim,
                    config.heads,
                    config.ffn_mult,
                )
            })
            .collect();

        let downs = (1..config.levels)
            .map(|l| {
                let d = Downsample::init(&mut ps, &mut rng, &format!("down{l}"), dim);
                let b = EncoderBlock::init(
                    &mut ps,
                    &mut rng,
                    &format!("lvl{l}"),
                    dim,
                    config.heads,
                    config.ffn_mult,
                );
                (d, b)
            })
            .collect();

        let cls_head = ConvHead::init(
            &mut ps,
            &mut rng,
            "cls_head",
            dim,
            config.classes,
            config.head_convs,
            config.head_kernel,
            CLS_BIAS_INIT,
        );
        let loc_head = ConvHead::init(
            &mut ps,
            &mut rng,
            "loc_head",
            dim,
            2,
            config.head_convs,
            config.head_kernel,
            0.0,
        );

        let (text, fuse) = if config.mode == Mode::Nlq {
            let proj = crate::network::layers::Linear::init(
                &mut ps,
                &mut rng,
                "text.proj",
                config.text_dim,
                dim,
            );
            let blocks = (0..config.text_layers)
                .map(|i| {
                    TextBlock::init(
                        &mut ps,
                        &mut rng,
                        &format!("text.enc{i}"),
                        dim,
                        config.heads,
                        config.ffn_mult,
                    )
                })
                .collect();
            let fuse = (0..config.fuse_layers)
                .map(|i| {
                    CrossBlock::init(
                        &mut ps,
                        &mut rng,
                        &format!("fuse{i}"),
                        dim,
                        config.heads,
                        config.ffn_mult,
                    )
                })
                .collect();
            (Some(TextEncoder { proj, blocks }), fuse)
        } else {
            (None, Vec::new())
        };

        let sens = SensitivityParams::register(
            &mut ps,
            config.classes,
            config.mu_init,
            config.sigma_init,
            config.sigma_min,
            config.sigma_max,
            config.learn_sensitivity,
        )?;

        Ok(Model {
            config,
            params: ps,
            sens,
            arch: Arch {
                proj,
                blocks,
                downs,
                cls_head,
                loc_head,
                text: text.map(|t| t),
                fuse,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sensitivity(&self) -> &SensitivityParams {
        &self.sens
    }

    /// Pyramid geometry matching this model's dense outputs for a video.
    pub fn pyramid_points(&self, frames: usize, stride_seconds: f64) -> Result<Vec<PyramidPoint>> {
        build_pyramid(frames, self.config.levels, stride_seconds)
    }

    fn check_video(&self, video: &VideoInput) -> Result<usize> {
        if video.sources.len() != self.config.source_dims.len() {
            return Err(Error::data(format!(
                "expected {} feature sources, got {}",
                self.config.source_dims.len(),
                video.sources.len()
            )));
        }
        let frames = video.frames();
        for (i, (src, &want)) in video
            .sources
            .iter()
            .zip(&self.config.source_dims)
            .enumerate()
        {
            let (t, d) = src.dims2()?;
            if d != want {
                return Err(Error::data(format!(
                    "source {i}: expected {want} channels, got {d}"
                )));
            }
            if t != frames {
                return Err(Error::data(format!(
                    "source {i}: {t} frames but source 0 has {frames}"
                )));
            }
        }
        if frames < self.config.pad_multiple() {
            return Err(Error::data(format!(
                "video too short: {frames} frames for a {}-level pyramid",
                self.config.levels
            )));
        }
        Ok(frames)
    }

    /// Full differentiable forward pass. `text` is required in NLQ mode:
    /// a `[tokens, text_dim]` embedding matrix.
    pub fn forward<'g>(
        &self,
        tape: &'g Tape,
        bound: &BoundParams<'g>,
        video: &VideoInput,
        text: Option<&Tensor>,
    ) -> Result<ForwardOutput<'g>> {
        let frames = self.check_video(video)?;
        let mult = self.config.pad_multiple();
        let pad_to = frames.div_ceil(mult) * mult;
        self.forward_padded(tape, bound, video, text, pad_to)
    }

    /// Forward pass with an explicit padded length (a multiple of the
    /// pyramid granularity, >= the video's frame count). Outputs cover only
    /// the valid points, so extra padding must not change them.
    pub fn forward_padded<'g>(
        &self,
        tape: &'g Tape,
        bound: &BoundParams<'g>,
        video: &VideoInput,
        text: Option<&Tensor>,
        pad_to: usize,
    ) -> Result<ForwardOutput<'g>> {
        let frames = self.check_video(video)?;
        let mult = self.config.pad_multiple();
        if pad_to < frames || pad_to % mult != 0 {
            return Err(Error::invalid(format!(
                "pad_to {pad_to} must be a multiple of {mult} and >= {frames}"
            )));
        }
        let dim = self.config.embed_dim;

        // Per-source projection at full resolution, concatenated over
        // channels, plus positional encodings; padding rows are exact zeros.
        let mut projected = Vec::with_capacity(video.sources.len());
        for (src, proj) in video.sources.iter().zip(&self.arch.proj) {
            let x = tape.constant(src.clone());
            projected.push(proj.forward(bound, x)?);
        }
        let mut x = if projected.len() == 1 {
            projected[0]
        } else {
            concat(&projected, 1)?
        };
        x = x.add(tape.constant(sinusoidal_encoding(frames, dim)))?;
        if pad_to > frames {
            let zeros = tape.constant(Tensor::zeros(&[pad_to - frames, dim]));
            x = concat(&[x, zeros], 0)?;
        }
        let mask = SeqMask::new(pad_to, frames);

        for block in &self.arch.blocks {
            x = block.forward(tape, bound, x, &mask)?;
        }

        // Language side: encode tokens, fuse at full resolution.
        let (fused_frames, query_feat) = if self.config.mode == Mode::Nlq {
            let text_encoder = self.arch.text.as_ref().expect("nlq arch has text encoder");
            let tokens = text.ok_or_else(|| {
                Error::invalid("nlq forward pass needs token embeddings")
            })?;
            let (n_t, d_t) = tokens.dims2()?;
            if d_t != self.config.text_dim {
                return Err(Error::data(format!(
                    "text tokens have {d_t} channels, model expects {}",
                    self.config.text_dim
                )));
            }
            if n_t == 0 || n_t > self.config.max_text_tokens {
                return Err(Error::data(format!(
                    "token count {n_t} outside 1..={}",
                    self.config.max_text_tokens
                )));
            }
            let mut t = text_encoder.proj.forward(bound, tape.constant(tokens.clone()))?;
            for block in &text_encoder.blocks {
                t = block.forward(bound, t)?;
            }
            let query = t.mean_axis(0)?;
            for block in &self.arch.fuse {
                x = block.forward(tape, bound, x, t, &mask)?;
            }
            (Some(x.slice(0, 0, frames)?), Some(query))
        } else {
            (None, None)
        };

        // Pyramid: keep each level's map and validity.
        let mut levels = vec![(x, mask.clone())];
        for (down, block) in &self.arch.downs {
            let (prev, prev_mask) = levels.last().unwrap();
            let mut y = down.forward(bound, *prev)?;
            let next_mask = prev_mask.downsampled();
            y = next_mask.apply(tape, y)?;
            y = block.forward(tape, bound, y, &next_mask)?;
            levels.push((y, next_mask));
        }

        let mut cls_parts = Vec::with_capacity(levels.len());
        let mut loc_parts = Vec::with_capacity(levels.len());
        let mut level_valid = Vec::with_capacity(levels.len());
        for (l, (feat, m)) in levels.iter().enumerate() {
            let valid = level_len(frames, l);
            debug_assert_eq!(valid, m.valid);
            level_valid.push(valid);
            let cls = self
                .arch
                .cls_head
                .forward(tape, bound, *feat, m)?
                .slice(0, 0, valid)?;
            let stride_s = (1usize << l) as f64 * video.stride_seconds;
            let loc = self
                .arch
                .loc_head
                .forward(tape, bound, *feat, m)?
                .slice(0, 0, valid)?
                .softplus()
                .scale(stride_s);
            cls_parts.push(cls);
            loc_parts.push(loc);
        }

        Ok(ForwardOutput {
            cls: concat(&cls_parts, 0)?,
            loc: concat(&loc_parts, 0)?,
            fused_frames,
            query_feat,
            level_valid,
        })
    }

    /// Inference-only forward pass returning plain tensors.
    pub fn forward_dense(&self, video: &VideoInput, text: Option<&Tensor>) -> Result<DenseOutput> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.forward(&tape, &bound, video, text)?;
        Ok(DenseOutput {
            cls: out.cls.value(),
            loc: out.loc.value(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::SeqMask;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            classes: 3,
            source_dims: vec![6],
            proj_dims: vec![16],
            embed_dim: 16,
            heads: 2,
            depth: 1,
            levels: 3,
            head_convs: 1,
            head_kernel: 3,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn video(frames: usize, dim: usize, seed: u64) -> VideoInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoInput {
            sources: vec![Tensor::randn(&[frames, dim], 1.0, &mut rng)],
            stride_seconds: 1.0,
        }
    }

    #[test]
    fn dense_output_shapes_follow_pyramid() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let out = model.forward_dense(&video(8, 6, 1), None).unwrap();
        // 8 + 4 + 2 points.
        assert_eq!(out.cls.shape(), &[14, 3]);
        assert_eq!(out.loc.shape(), &[14, 2]);
        assert!(out.cls.all_finite());
        assert!(out.loc.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn two_sources_concatenate_projections() {
        let cfg = ModelConfig {
            classes: 2,
            source_dims: vec![10, 6],
            proj_dims: vec![24, 8],
            embed_dim: 32,
            heads: 4,
            depth: 1,
            levels: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = VideoInput {
            sources: vec![
                Tensor::randn(&[8, 10], 1.0, &mut rng),
                Tensor::randn(&[8, 6], 1.0, &mut rng),
            ],
            stride_seconds: 0.5,
        };
        let out = model.forward_dense(&v, None).unwrap();
        assert_eq!(out.cls.shape(), &[12, 2]);
        // Projection widths are visible in the parameter shapes.
        let w0 = model.params().id_of("proj0.l1.w").unwrap();
        assert_eq!(model.params().value(w0).shape(), &[10, 24]);
        let w1 = model.params().id_of("proj1.l1.w").unwrap();
        assert_eq!(model.params().value(w1).shape(), &[6, 8]);
    }

    #[test]
    fn zeroed_final_head_gives_zero_logits() {
        let mut model = Model::new(tiny_config(), 5).unwrap();
        let w = model.params().id_of("cls_head.final.w").unwrap();
        let shape = model.params().value(w).shape().to_vec();
        *model.params_mut().value_mut(w) = Tensor::zeros(&shape);
        let b = model.params().id_of("cls_head.final.b").unwrap();
        let bshape = model.params().value(b).shape().to_vec();
        *model.params_mut().value_mut(b) = Tensor::zeros(&bshape);
        let out = model.forward_dense(&video(8, 6, 4), None).unwrap();
        assert!(out.cls.data().iter().all(|&v| v == 0.0));
        // Zero logits mean sigmoid scores of one half everywhere.
        assert!(out
            .cls
            .data()
            .iter()
            .all(|&v| (1.0 / (1.0 + (-v).exp()) - 0.5).abs() < 1e-15));
    }

    #[test]
    fn fixed_seed_forward_is_reproducible() {
        let run = || {
            let model = Model::new(tiny_config(), 11).unwrap();
            let out = model.forward_dense(&video(16, 6, 7), None).unwrap();
            (out.cls.data().to_vec(), out.loc.data().to_vec())
        };
        let (c1, l1) = run();
        let (c2, l2) = run();
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let model = Model::new(tiny_config(), 9).unwrap();
        let v = video(16, 6, 3);
        let base = model.forward_dense(&v, None).unwrap();

        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let padded = model
            .forward_padded(&tape, &bound, &v, None, 32)
            .unwrap();
        let padded_cls = padded.cls.value();
        let padded_loc = padded.loc.value();
        assert_eq!(padded_cls.shape(), base.cls.shape());
        for (a, b) in padded_cls.data().iter().zip(base.cls.data()) {
            assert!((a - b).abs() < 1e-9, "cls {a} vs {b}");
        }
        for (a, b) in padded_loc.data().iter().zip(base.loc.data()) {
            assert!((a - b).abs() < 1e-9, "loc {a} vs {b}");
        }
    }

    #[test]
    fn odd_length_video_is_padded_internally() {
        let model = Model::new(tiny_config(), 9).unwrap();
        let v = video(13, 6, 3);
        let out = model.forward_dense(&v, None).unwrap();
        // ceil(13) + ceil(13/2) + ceil(13/4) = 13 + 7 + 4.
        assert_eq!(out.cls.shape(), &[24, 3]);
    }

    fn nlq_config() -> ModelConfig {
        ModelConfig {
            mode: Mode::Nlq,
            classes: 1,
            source_dims: vec![6],
            proj_dims: vec![16],
            embed_dim: 16,
            heads: 2,
            depth: 1,
            levels: 2,
            head_convs: 1,
            text_dim: 5,
            text_layers: 1,
            fuse_layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn nlq_forward_produces_query_and_frames() {
        let model = Model::new(nlq_config(), 2).unwrap();
        let v = video(8, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let out = model.forward(&tape, &bound, &v, Some(&text)).unwrap();
        assert_eq!(out.cls.shape(), vec![12, 1]);
        assert_eq!(out.fused_frames.unwrap().shape(), vec![8, 16]);
        assert_eq!(out.query_feat.unwrap().shape(), vec![16]);
    }

    #[test]
    fn nlq_requires_text() {
        let model = Model::new(nlq_config(), 2).unwrap();
        assert!(model.forward_dense(&video(8, 6, 1), None).is_err());
    }

    #[test]
    fn text_token_permutation_leaves_fusion_unchanged() {
        let model = Model::new(nlq_config(), 8).unwrap();
        let v = video(8, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let base = model.forward_dense(&v, Some(&text)).unwrap();

        // Permute token rows.
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(&[5, 5]);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..5 {
                let val = text.at2(p, c);
                permuted.data_mut()[r * 5 + c] = val;
            }
        }
        let shuffled = model.forward_dense(&v, Some(&permuted)).unwrap();
        for (a, b) in base.cls.data().iter().zip(shuffled.cls.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in base.loc.data().iter().zip(shuffled.loc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_matches_independent_reference() {
        // Tiny fixed-weight block evaluated against a step-by-step scalar
        // reimplementation that never touches the tape machinery.
        let dim = 4usize;
        let heads = 2usize;
        let t_len = 3usize;
        let cfg = ModelConfig {
            classes: 2,
            source_dims: vec![4],
            proj_dims: vec![4],
            embed_dim: dim,
            heads,
            depth: 1,
            levels: 1,
            head_convs: 1,
            ffn_mult: 2,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Small deterministic weights.
        let names: Vec<String> = model
            .params()
            .iter()
            .map(|(_, e)| e.name.clone())
            .collect();
        for name in names {
            let id = model.params().id_of(&name).unwrap();
            let shape = model.params().value(id).shape().to_vec();
            let fresh = Tensor::randn(&shape, 0.2, &mut rng);
            if name.contains("gamma") {
                *model.params_mut().value_mut(id) = fresh.map(|v| 1.0 + 0.1 * v);
            } else {
                *model.params_mut().value_mut(id) = fresh;
            }
        }

        let x_in = Tensor::randn(&[t_len, dim], 0.7, &mut rng);
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let x_var = tape.constant(x_in.clone());
        let mask = SeqMask::new(t_len, t_len);
        let got = model.arch.blocks[0]
            .forward(&tape, &bound, x_var, &mask)
            .unwrap()
            .value();

        let want = reference_block(&model, &x_in, t_len, dim, heads);
        for (a, b) in got.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    // Plain-loop reference used only by the test above.
    fn reference_block(
        model: &Model,
        x: &Tensor,
        t_len: usize,
        dim: usize,
        heads: usize,
    ) -> Vec<f64> {
        let p = |name: &str| -> Vec<f64> {
            model
                .params()
                .value(model.params().id_of(name).unwrap())
                .data()
                .to_vec()
        };
        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[i * k + kk] * b[kk * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        };
        let add_row = |x: &mut [f64], row: &[f64], m: usize, n: usize| {
            for i in 0..m {
                for j in 0..n {
                    x[i * n + j] += row[j];
                }
            }
        };
        let layer_norm = |x: &[f64], gamma: &[f64], beta: &[f64], m: usize, n: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean: f64 = row.iter().sum::<f64>() / n as f64;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
                }
            }
            out
        };
        let softmax_rows = |x: &mut [f64], m: usize, n: usize| {
            for i in 0..m {
                let row = &mut x[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh());

        let normed = layer_norm(x.data(), &p("enc0.ln1.gamma"), &p("enc0.ln1.beta"), t_len, dim);

        // Temporal attention.
        let dh = dim / heads;
        let mut q = matmul(&normed, &p("enc0.tattn.q.w"), t_len, dim, dim);
        add_row(&mut q, &p("enc0.tattn.q.b"), t_len, dim);
        let mut k = matmul(&normed, &p("enc0.tattn.k.w"), t_len, dim, dim);
        add_row(&mut k, &p("enc0.tattn.k.b"), t_len, dim);
        let mut v = matmul(&normed, &p("enc0.tattn.v.w"), t_len, dim, dim);
        add_row(&mut v, &p("enc0.tattn.v.b"), t_len, dim);
        let mut t_merged = vec![0.0; t_len * dim];
        for h in 0..heads {
            let mut scores = vec![0.0; t_len * t_len];
            for i in 0..t_len {
                for j in 0..t_len {
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += q[i * dim + h * dh + d] * k[j * dim + h * dh + d];
                    }
                    scores[i * t_len + j] = acc / (dh as f64).sqrt();
                }
            }
            softmax_rows(&mut scores, t_len, t_len);
            for i in 0..t_len {
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t_len {
                        acc += scores[i * t_len + j] * v[j * dim + h * dh + d];
                    }
                    t_merged[i * dim + h * dh + d] = acc;
                }
            }
        }
        let mut t_out = matmul(&t_merged, &p("enc0.tattn.out.w"), t_len, dim, dim);
        add_row(&mut t_out, &p("enc0.tattn.out.b"), t_len, dim);

        // Channel attention.
        let mut c_merged = vec![0.0; t_len * dim * heads];
        for h in 0..heads {
            let qh = matmul(&normed, &p(&format!("enc0.cattn.q{h}.w")), t_len, dim, dim);
            let kh = matmul(&normed, &p(&format!("enc0.cattn.k{h}.w")), t_len, dim, dim);
            let vh = matmul(&normed, &p(&format!("enc0.cattn.v{h}.w")), t_len, dim, dim);
            let mut scores = vec![0.0; dim * dim];
            for a in 0..dim {
                for b in 0..dim {
                    let mut acc = 0.0;
                    for t in 0..t_len {
                        acc += qh[t * dim + a] * kh[t * dim + b];
                    }
                    scores[a * dim + b] = acc / (t_len as f64).sqrt();
                }
            }
            softmax_rows(&mut scores, dim, dim);
            for t in 0..t_len {
                for a in 0..dim {
                    let mut acc = 0.0;
                    for b in 0..dim {
                        acc += scores[a * dim + b] * vh[t * dim + b];
                    }
                    c_merged[t * dim * heads + h * dim + a] = acc;
                }
            }
        }
        let mut c_out = matmul(&c_merged, &p("enc0.cattn.out.w"), t_len, dim * heads, dim);
        add_row(&mut c_out, &p("enc0.cattn.out.b"), t_len, dim);

        // Residual + FFN.
        let mut y: Vec<f64> = x
            .data()
            .iter()
            .zip(t_out.iter().zip(&c_out))
            .map(|(&xv, (&tv, &cv))| xv + 0.5 * (tv + cv))
            .collect();
        let normed2 = layer_norm(&y, &p("enc0.ln2.gamma"), &p("enc0.ln2.beta"), t_len, dim);
        let hidden_dim = 2 * dim;
        let mut hidden = matmul(&normed2, &p("enc0.ffn.in.w"), t_len, dim, hidden_dim);
        add_row(&mut hidden, &p("enc0.ffn.in.b"), t_len, hidden_dim);
        for v in hidden.iter_mut() {
            *v = gelu(*v);
        }
        let mut ff = matmul(&hidden, &p("enc0.ffn.out.w"), t_len, hidden_dim, dim);
        add_row(&mut ff, &p("enc0.ffn.out.b"), t_len, dim);
        for (yv, fv) in y.iter_mut().zip(&ff) {
            *yv += *fv;
        }
        y
    }

    #[test]
    fn zero_features_give_constant_rows_after_projection() {
        // With all-zero inputs every projected row is the pure bias pathway,
        // so all rows coincide.
        let model = Model::new(tiny_config(), 6).unwrap();
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let x = tape.constant(Tensor::zeros(&[8, 6]));
        let y = model.arch.proj[0].forward(&bound, x).unwrap().value();
        for r in 1..8 {
            assert_eq!(y.row(r), y.row(0));
        }
    }
}
