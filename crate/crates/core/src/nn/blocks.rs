//! Transformer block pairs (regular + shifted window) for the encoder and
//! the cross-attention decoder, and the dense down/up-sampling convolutions
//! that move between resolutions.

use rand_chacha::ChaCha8Rng;

use super::attention::WindowAttention;
use super::windows::WindowSpec;
use super::{to_chw, to_tokens, BatchNorm2d, BnStats, Conv2dLayer, LayerNormLayer, Linear, Param};
use crate::tensor::{Tape, TensorError, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, ratio: usize) -> Self {
        Mlp { fc1: Linear::new(rng, dim, dim * ratio), fc2: Linear::new(rng, dim * ratio, dim) }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(t, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// One pre-norm transformer block over CHW maps:
/// x ← x + Attn(LN(x)); x ← x + MLP(LN(x)).
///
/// Tokenization/detokenization happen inside, so the block composes directly
/// with the convolutional resampling modules. When `skip_q` is given the
/// attention queries come from the (identically normalized) skip stream.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: WindowAttention,
    pub ln2: LayerNormLayer,
    pub mlp: Mlp,
    pub window: usize,
    pub shifted: bool,
}

impl TransformerBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        conv_projection: bool,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNormLayer::new(channels),
            attn: WindowAttention::new(rng, channels, heads, window, conv_projection)?,
            ln2: LayerNormLayer::new(channels),
            mlp: Mlp::new(rng, channels, mlp_ratio),
            window,
            shifted,
        })
    }

    pub fn spec_for(&self, h: usize, w: usize) -> Result<WindowSpec> {
        let shift = if self.shifted { self.window / 2 } else { 0 };
        WindowSpec::new(self.window, shift, h, w)
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId, skip_q: Option<TensorId>) -> Result<TensorId> {
        let s = t.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let spec = self.spec_for(h, w)?;

        let tok = to_tokens(t, x)?;
        let normed = self.ln1.forward(t, tok)?;
        let x_n = to_chw(t, normed, h, w)?;
        let q_n = match skip_q {
            None => x_n,
            Some(skip) => {
                if t.shape(skip) != s.as_slice() {
                    return Err(TensorError::ShapeMismatch {
                        context: "decoder block",
                        detail: format!("skip shape {:?} must match {:?}", t.shape(skip), s),
                    });
                }
                let st = to_tokens(t, skip)?;
                let sn = self.ln1.forward(t, st)?;
                to_chw(t, sn, h, w)?
            }
        };
        let attn = self.attn.forward(t, x_n, q_n, &spec)?;
        let x1 = t.add(x, attn)?;

        let tok1 = to_tokens(t, x1)?;
        let normed2 = self.ln2.forward(t, tok1)?;
        let mlp = self.mlp.forward(t, normed2)?;
        let tok2 = t.add(tok1, mlp)?;
        to_chw(t, tok2, h, w)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}

/// Two successive encoder blocks: regular windows, then shifted windows.
#[derive(Debug, Clone)]
pub struct EncoderBlockPair {
    pub first: TransformerBlock,
    pub second: TransformerBlock,
}

impl EncoderBlockPair {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        conv_projection: bool,
    ) -> Result<Self> {
        Ok(EncoderBlockPair {
            first: TransformerBlock::new(rng, channels, heads, window, mlp_ratio, false, conv_projection)?,
            second: TransformerBlock::new(rng, channels, heads, window, mlp_ratio, true, conv_projection)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let x = self.first.forward(t, x, None)?;
        self.second.forward(t, x, None)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.first.collect_params(&format!("{prefix}.blk0"), out);
        self.second.collect_params(&format!("{prefix}.blk1"), out);
    }
}

/// How the decoder consumes skip features: cross-attention queries from the
/// skip stream, or (ablation) channel concatenation fused by a 1×1 conv in
/// front of plain self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    CrossAttention,
    ConcatFuse,
}

#[derive(Debug, Clone)]
pub struct DecoderBlockPair {
    pub mode: DecoderMode,
    pub first: TransformerBlock,
    pub second: TransformerBlock,
    pub fuse1: Option<Conv2dLayer>,
    pub fuse2: Option<Conv2dLayer>,
}

impl DecoderBlockPair {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        conv_projection: bool,
        mode: DecoderMode,
    ) -> Result<Self> {
        let (fuse1, fuse2) = match mode {
            DecoderMode::CrossAttention => (None, None),
            DecoderMode::ConcatFuse => (
                Some(Conv2dLayer::new(rng, 2 * channels, channels, 1, 1, 0, 1)),
                Some(Conv2dLayer::new(rng, 2 * channels, channels, 1, 1, 0, 1)),
            ),
        };
        Ok(DecoderBlockPair {
            mode,
            first: TransformerBlock::new(rng, channels, heads, window, mlp_ratio, false, conv_projection)?,
            second: TransformerBlock::new(rng, channels, heads, window, mlp_ratio, true, conv_projection)?,
            fuse1,
            fuse2,
        })
    }

    pub fn forward(&self, t: &mut Tape, x_dec: TensorId, skip: TensorId) -> Result<TensorId> {
        if t.shape(x_dec) != t.shape(skip) {
            return Err(TensorError::ShapeMismatch {
                context: "decoder pair",
                detail: format!("decoder {:?} vs skip {:?}", t.shape(x_dec), t.shape(skip)),
            });
        }
        match self.mode {
            DecoderMode::CrossAttention => {
                let x1 = self.first.forward(t, x_dec, Some(skip))?;
                self.second.forward(t, x1, Some(skip))
            }
            DecoderMode::ConcatFuse => {
                let cat1 = t.concat(&[skip, x_dec], 1)?;
                let f1 = self.fuse1.as_ref().expect("concat mode has fuse convs").forward(t, cat1)?;
                let x1 = self.first.forward(t, f1, None)?;
                let cat2 = t.concat(&[skip, x1], 1)?;
                let f2 = self.fuse2.as_ref().expect("concat mode has fuse convs").forward(t, cat2)?;
                self.second.forward(t, f2, None)
            }
        }
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(f) = self.fuse1.as_mut() {
            f.collect_params(&format!("{prefix}.fuse0"), out);
        }
        if let Some(f) = self.fuse2.as_mut() {
            f.collect_params(&format!("{prefix}.fuse1"), out);
        }
        self.first.collect_params(&format!("{prefix}.blk0"), out);
        self.second.collect_params(&format!("{prefix}.blk1"), out);
    }
}

/// Dense down-sampling convolution: pixel-unshuffle(r), then a 1×1 conv
/// projecting the r²-expanded channels, batch norm and GELU.
#[derive(Debug, Clone)]
pub struct Ddc {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
    pub r: usize,
}

impl Ddc {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, r: usize) -> Self {
        Ddc {
            conv: Conv2dLayer::new(rng, c_in * r * r, c_out, 1, 1, 0, 1),
            bn: BatchNorm2d::new(c_out),
            r,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId, train: bool) -> Result<TensorId> {
        let u = t.pixel_unshuffle(x, self.r)?;
        let c = self.conv.forward(t, u)?;
        let b = self.bn.forward(t, c, train)?;
        Ok(t.gelu(b))
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }

    pub fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a std::cell::RefCell<BnStats>)>) {
        self.bn.collect_buffers(&format!("{prefix}.bn"), out);
    }
}

/// Dense up-sampling convolution: 1×1 conv to C_out·r² channels, batch
/// norm, GELU, then pixel-shuffle(r).
#[derive(Debug, Clone)]
pub struct Duc {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
    pub r: usize,
}

impl Duc {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, r: usize) -> Self {
        Duc {
            conv: Conv2dLayer::new(rng, c_in, c_out * r * r, 1, 1, 0, 1),
            bn: BatchNorm2d::new(c_out * r * r),
            r,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId, train: bool) -> Result<TensorId> {
        let c = self.conv.forward(t, x)?;
        let b = self.bn.forward(t, c, train)?;
        let g = t.gelu(b);
        t.pixel_shuffle(g, self.r)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }

    pub fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a std::cell::RefCell<BnStats>)>) {
        self.bn.collect_buffers(&format!("{prefix}.bn"), out);
    }
}
