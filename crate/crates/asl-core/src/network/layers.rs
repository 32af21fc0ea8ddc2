//! Parameterized building blocks. Each struct owns parameter ids in a
//! [`ParamStore`]; forward passes go through per-tape bound leaves so the
//! same parameters can feed many ops with correctly accumulated gradients.

use rand::Rng;

use crate::autodiff::params::{BoundParams, ParamId, ParamStore};
use crate::autodiff::tape::{concat, scaled_dot_attention, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(&[rows, cols], std, rng)
}

/// Validity information for a padded sequence.
#[derive(Debug, Clone)]
pub struct SeqMask {
    /// 1.0 for valid rows, 0.0 for padding.
    pub col: Tensor,
    /// Key mask for attention (true = valid).
    pub keys: Vec<bool>,
    pub valid: usize,
}

impl SeqMask {
    pub fn new(total: usize, valid: usize) -> Self {
        let mut col = Tensor::zeros(&[total]);
        for i in 0..valid.min(total) {
            col.data_mut()[i] = 1.0;
        }
        let keys = (0..total).map(|i| i < valid).collect();
        SeqMask { col, keys, valid }
    }

    pub fn is_full(&self) -> bool {
        self.valid == self.keys.len()
    }

    /// Mask after halving the sequence with a stride-2 op.
    pub fn downsampled(&self) -> SeqMask {
        SeqMask::new(self.keys.len() / 2, self.valid.div_ceil(2))
    }

    /// Zeroes padded rows; no-op when everything is valid.
    pub fn apply<'g>(&self, tape: &'g Tape, x: Var<'g>) -> Result<Var<'g>> {
        if self.is_full() {
            return Ok(x);
        }
        x.mul_col(tape.constant(self.col.clone()))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: ps.register(format!("{name}.w"), xavier(d_in, d_out, rng), true, true),
            b: ps.register(format!("{name}.b"), Tensor::zeros(&[d_out]), true, false),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(bp.var(self.w))?.add_row(bp.var(self.b))
    }
}

/// Affine layer-norm along the channel axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gamma: ps.register(format!("{name}.gamma"), Tensor::ones(&[dim]), true, false),
            beta: ps.register(format!("{name}.beta"), Tensor::zeros(&[dim]), true, false),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(LN_EPS)
            .mul_row(bp.var(self.gamma))?
            .add_row(bp.var(self.beta))
    }
}

/// Multi-head self/cross attention over the time axis.
#[derive(Debug, Clone)]
pub struct TimeAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl TimeAttention {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        TimeAttention {
            q: Linear::init(ps, rng, &format!("{name}.q"), dim, dim),
            k: Linear::init(ps, rng, &format!("{name}.k"), dim, dim),
            v: Linear::init(ps, rng, &format!("{name}.v"), dim, dim),
            out: Linear::init(ps, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// `queries` come from one sequence, `keys_values` from another (the
    /// same one for self-attention). `key_mask` marks valid key positions.
    pub fn forward<'g>(
        &self,
        bp: &BoundParams<'g>,
        queries: Var<'g>,
        keys_values: Var<'g>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g>> {
        let dim = queries.shape()[1];
        let dh = dim / self.heads;
        let q = self.q.forward(bp, queries)?;
        let k = self.k.forward(bp, keys_values)?;
        let v = self.v.forward(bp, keys_values)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            head_outs.push(scaled_dot_attention(qh, kh, vh, key_mask, None)?);
        }
        let merged = concat(&head_outs, 1)?;
        self.out.forward(bp, merged)
    }
}

/// Multi-head attention across channels: tokens are feature channels, each
/// head applies its own full-width projection so attention maps are
/// `dim x dim`. Padded time positions must already be zeroed by the caller;
/// the similarity scale uses the valid length so padding cannot alter it.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: Linear,
    heads: usize,
}

impl ChannelAttention {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for h in 0..heads {
            for (tag, list) in [("q", &mut q), ("k", &mut k), ("v", &mut v)] {
                list.push(ps.register(
                    format!("{name}.{tag}{h}.w"),
                    xavier(dim, dim, rng),
                    true,
                    true,
                ));
            }
        }
        ChannelAttention {
            q,
            k,
            v,
            out: Linear::init(ps, rng, &format!("{name}.out"), dim * heads, dim),
            heads,
        }
    }

    pub fn forward<'g>(
        &self,
        bp: &BoundParams<'g>,
        x: Var<'g>,
        valid_len: usize,
    ) -> Result<Var<'g>> {
        let scale = 1.0 / (valid_len.max(1) as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qt = x.matmul(bp.var(self.q[h]))?.transpose()?;
            let kt = x.matmul(bp.var(self.k[h]))?.transpose()?;
            let vt = x.matmul(bp.var(self.v[h]))?.transpose()?;
            let mixed = scaled_dot_attention(qt, kt, vt, None, Some(scale))?;
            head_outs.push(mixed.transpose()?);
        }
        let merged = concat(&head_outs, 1)?;
        self.out.forward(bp, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        mult: usize,
    ) -> Self {
        FeedForward {
            inner: Linear::init(ps, rng, &format!("{name}.in"), dim, dim * mult),
            outer: Linear::init(ps, rng, &format!("{name}.out"), dim * mult, dim),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.outer.forward(bp, self.inner.forward(bp, x)?.gelu())
    }
}

/// Encoder block with temporal and channel attention evaluated in parallel
/// from the same normalized input, averaged, then a feed-forward residual.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln_attn: Norm,
    temporal: TimeAttention,
    channel: ChannelAttention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        EncoderBlock {
            ln_attn: Norm::init(ps, &format!("{name}.ln1"), dim),
            temporal: TimeAttention::init(ps, rng, &format!("{name}.tattn"), dim, heads),
            channel: ChannelAttention::init(ps, rng, &format!("{name}.cattn"), dim, heads),
            ln_ffn: Norm::init(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::init(ps, rng, &format!("{name}.ffn"), dim, ffn_mult),
        }
    }

    /// Input rows beyond `mask.valid` must be zero; the output keeps that
    /// invariant.
    pub fn forward<'g>(
        &self,
        tape: &'g Tape,
        bp: &BoundParams<'g>,
        x: Var<'g>,
        mask: &SeqMask,
    ) -> Result<Var<'g>> {
        let normed = mask.apply(tape, self.ln_attn.forward(bp, x)?)?;
        let key_mask = if mask.is_full() {
            None
        } else {
            Some(&mask.keys[..])
        };
        let t_out = self.temporal.forward(bp, normed, normed, key_mask)?;
        let c_out = self.channel.forward(bp, normed, mask.valid)?;
        let fused = t_out.add(c_out)?.scale(0.5);
        let y = mask.apply(tape, x.add(fused)?)?;
        let ff = self.ffn.forward(bp, self.ln_ffn.forward(bp, y)?)?;
        mask.apply(tape, y.add(ff)?)
    }
}

/// Self-attention block for text tokens (no padding, no channel branch).
#[derive(Debug, Clone)]
pub struct TextBlock {
    ln_attn: Norm,
    attn: TimeAttention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

impl TextBlock {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        TextBlock {
            ln_attn: Norm::init(ps, &format!("{name}.ln1"), dim),
            attn: TimeAttention::init(ps, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: Norm::init(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::init(ps, rng, &format!("{name}.ffn"), dim, ffn_mult),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let normed = self.ln_attn.forward(bp, x)?;
        let y = x.add(self.attn.forward(bp, normed, normed, None)?)?;
        let ff = self.ffn.forward(bp, self.ln_ffn.forward(bp, y)?)?;
        y.add(ff)
    }
}

/// Cross-attention block: video rows query the text tokens.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    ln_q: Norm,
    attn: TimeAttention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

impl CrossBlock {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        CrossBlock {
            ln_q: Norm::init(ps, &format!("{name}.lnq"), dim),
            attn: TimeAttention::init(ps, rng, &format!("{name}.xattn"), dim, heads),
            ln_ffn: Norm::init(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::init(ps, rng, &format!("{name}.ffn"), dim, ffn_mult),
        }
    }

    pub fn forward<'g>(
        &self,
        tape: &'g Tape,
        bp: &BoundParams<'g>,
        video: Var<'g>,
        text: Var<'g>,
        mask: &SeqMask,
    ) -> Result<Var<'g>> {
        let q = mask.apply(tape, self.ln_q.forward(bp, video)?)?;
        let mixed = self.attn.forward(bp, q, text, None)?;
        let y = mask.apply(tape, video.add(mixed)?)?;
        let ff = self.ffn.forward(bp, self.ln_ffn.forward(bp, y)?)?;
        mask.apply(tape, y.add(ff)?)
    }
}

/// Stride-2 depthwise convolution used between pyramid levels.
#[derive(Debug, Clone)]
pub struct Downsample {
    w: ParamId,
}

impl Downsample {
    pub fn init(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let std = (1.0 / 3.0f64).sqrt();
        Downsample {
            w: ps.register(
                format!("{name}.w"),
                Tensor::randn(&[dim, 3], std, rng),
                true,
                true,
            ),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv1d_depthwise(bp.var(self.w), 2)
    }
}

/// Stack of same-width 1D convolutions shared across pyramid levels, ending
/// in a projection to `out_dim` channels.
#[derive(Debug, Clone)]
pub struct ConvHead {
    convs: Vec<(ParamId, ParamId)>,
    final_w: ParamId,
    final_b: ParamId,
}

impl ConvHead {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        out_dim: usize,
        n_convs: usize,
        kernel: usize,
        final_bias: f64,
    ) -> Self {
        let mut convs = Vec::new();
        for i in 0..n_convs {
            let std = (1.0 / (dim * kernel) as f64).sqrt();
            let w = ps.register(
                format!("{name}.conv{i}.w"),
                Tensor::randn(&[dim, dim, kernel], std, rng),
                true,
                true,
            );
            let b = ps.register(format!("{name}.conv{i}.b"), Tensor::zeros(&[dim]), true, false);
            convs.push((w, b));
        }
        let std = (1.0 / (dim * kernel) as f64).sqrt();
        let final_w = ps.register(
            format!("{name}.final.w"),
            Tensor::randn(&[out_dim, dim, kernel], std, rng),
            true,
            true,
        );
        let final_b = ps.register(
            format!("{name}.final.b"),
            Tensor::full(&[out_dim], final_bias),
            true,
            false,
        );
        ConvHead {
            convs,
            final_w,
            final_b,
        }
    }

    pub fn forward<'g>(
        &self,
        tape: &'g Tape,
        bp: &BoundParams<'g>,
        x: Var<'g>,
        mask: &SeqMask,
    ) -> Result<Var<'g>> {
        let mut cur = x;
        for (w, b) in &self.convs {
            cur = mask.apply(tape, cur)?;
            cur = cur.conv1d(bp.var(*w), Some(bp.var(*b)), 1)?.gelu();
        }
        cur = mask.apply(tape, cur)?;
        cur.conv1d(bp.var(self.final_w), Some(bp.var(self.final_b)), 1)
    }
}

/// Two-layer projection for one feature source.
#[derive(Debug, Clone)]
pub struct SourceProjection {
    first: Linear,
    second: Linear,
}

impl SourceProjection {
    pub fn init(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        SourceProjection {
            first: Linear::init(ps, rng, &format!("{name}.l1"), d_in, d_out),
            second: Linear::init(ps, rng, &format!("{name}.l2"), d_out, d_out),
        }
    }

    pub fn forward<'g>(&self, bp: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.second.forward(bp, self.first.forward(bp, x)?.gelu())
    }
}

/// Fixed sinusoidal positional encodings for `len` positions of width `dim`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = (10_000.0f64).powf(2.0 * pair / dim as f64);
            let angle = t as f64 / rate;
            pe.data_mut()[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seq_mask_downsampling() {
        let m = SeqMask::new(16, 13);
        assert!(!m.is_full());
        let d = m.downsampled();
        assert_eq!(d.keys.len(), 8);
        assert_eq!(d.valid, 7);
        let full = SeqMask::new(8, 8);
        assert!(full.is_full());
    }

    #[test]
    fn linear_bias_only_on_zero_input() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(&mut ps, &mut rng, "l", 3, 4);
        ps.load_value("l.b", Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let y = lin.forward(&bp, x).unwrap().value();
        for r in 0..5 {
            assert_eq!(y.row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn encoder_block_single_step_passthrough() {
        // T=1: temporal attention softmaxes over one key, so the block is a
        // well-defined residual update with finite output.
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = EncoderBlock::init(&mut ps, &mut rng, "b", 8, 2, 2);
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let x = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let mask = SeqMask::new(1, 1);
        let y = block.forward(&tape, &bp, x, &mask).unwrap();
        assert_eq!(y.shape(), vec![1, 8]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn zeroed_attention_projections_reduce_to_ffn_residual() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = EncoderBlock::init(&mut ps, &mut rng, "b", 6, 2, 2);
        // Zero both attention output projections.
        ps.load_value("b.tattn.out.w", Tensor::zeros(&[6, 6])).unwrap();
        ps.load_value("b.cattn.out.w", Tensor::zeros(&[12, 6])).unwrap();
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let x_t = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let x = tape.constant(x_t.clone());
        let mask = SeqMask::new(4, 4);
        let y = block.forward(&tape, &bp, x, &mask).unwrap();

        // Reference: y = x + FFN(LN(x)) using the same parameters.
        let x2 = tape.constant(x_t);
        let normed = block.ln_ffn.forward(&bp, x2).unwrap();
        let ff = block.ffn.forward(&bp, normed).unwrap();
        let want = x2.add(ff).unwrap().value();
        let got = y.value();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoidal_encoding_shape_and_range() {
        let pe = sinusoidal_encoding(10, 8);
        assert_eq!(pe.shape(), &[10, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // Position 0: sin terms 0, cos terms 1.
        assert_eq!(pe.at2(0, 0), 0.0);
        assert_eq!(pe.at2(0, 1), 1.0);
    }
}
