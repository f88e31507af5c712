//! Windowed multi-head attention with convolutional (or, for the ablated
//! variant, per-token linear) projections. Self-attention and
//! cross-attention share one implementation: the query source is simply a
//! second input map.

use rand_chacha::ChaCha8Rng;

use super::windows::{build_shift_mask, window_partition, window_reverse, RelPosBias, WindowSpec};
use super::{to_chw, to_tokens, Conv2dLayer, Linear, Param};
use crate::tensor::{Tape, TensorError, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

/// Q/K/V projection: depthwise 3×3 + pointwise 1×1 convolution, or the
/// per-token linear map used by the no-conv-projection ablation.
#[derive(Debug, Clone)]
pub enum Projection {
    Conv { depthwise: Conv2dLayer, pointwise: Conv2dLayer },
    Linear(Linear),
}

impl Projection {
    pub fn conv(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Projection::Conv {
            depthwise: Conv2dLayer::new(rng, channels, channels, 3, 1, 1, channels),
            pointwise: Conv2dLayer::new(rng, channels, channels, 1, 1, 0, 1),
        }
    }

    pub fn linear(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Projection::Linear(Linear::new(rng, channels, channels))
    }

    /// Apply to a `[B,C,H,W]` map, preserving the resolution.
    pub fn apply(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            Projection::Conv { depthwise, pointwise } => {
                let d = depthwise.forward(t, x)?;
                pointwise.forward(t, d)
            }
            Projection::Linear(lin) => {
                let s = t.shape(x).to_vec();
                let tok = to_tokens(t, x)?;
                let y = lin.forward(t, tok)?;
                to_chw(t, y, s[2], s[3])
            }
        }
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Projection::Conv { depthwise, pointwise } => {
                depthwise.collect_params(&format!("{prefix}.depthwise"), out);
                pointwise.collect_params(&format!("{prefix}.pointwise"), out);
            }
            Projection::Linear(lin) => lin.collect_params(&format!("{prefix}.linear"), out),
        }
    }
}

/// Scaled dot-product attention over windowed tokens.
///
/// `q/k/v` are `[B·N, M², C]` partitioned tokens; returns the merged head
/// outputs in the same layout plus the `[B, N, heads, M², M²]` attention
/// probabilities. `bias` broadcasts per head, `mask` per window.
pub fn attend_windows(
    t: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    batch: usize,
    windows: usize,
    bias: Option<TensorId>,
    mask: Option<TensorId>,
) -> Result<(TensorId, TensorId)> {
    let s = t.shape(q).to_vec();
    let (tokens, channels) = (s[1], s[2]);
    if channels % heads != 0 {
        return Err(TensorError::Divisibility { context: "attention heads", value: channels, by: heads });
    }
    let dim = channels / heads;
    let split = |t: &mut Tape, x: TensorId| -> Result<TensorId> {
        let r = t.reshape(x, vec![batch, windows, tokens, heads, dim])?;
        t.permute(r, &[0, 1, 3, 2, 4])
    };
    let qh = split(t, q)?;
    let kh = split(t, k)?;
    let vh = split(t, v)?;
    let kt = t.permute(kh, &[0, 1, 2, 4, 3])?;
    let scores = t.matmul(qh, kt)?;
    let mut scores = t.scale(scores, 1.0 / (dim as f64).sqrt());
    if let Some(bias) = bias {
        scores = t.add(scores, bias)?;
    }
    if let Some(mask) = mask {
        scores = t.add(scores, mask)?;
    }
    let probs = t.softmax(scores, 4)?;
    let ctx = t.matmul(probs, vh)?;
    let merged = t.permute(ctx, &[0, 1, 3, 2, 4])?;
    let out = t.reshape(merged, vec![batch * windows, tokens, channels])?;
    Ok((out, probs))
}

/// CW-MSA / SCW-MSA: projections on the full-resolution map, window
/// partition, biased (and, when shifted, masked) attention per window,
/// head merge, output projection, window reverse.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub q_proj: Projection,
    pub k_proj: Projection,
    pub v_proj: Projection,
    pub out_proj: Linear,
    pub bias: RelPosBias,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        window: usize,
        conv_projection: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(TensorError::Divisibility { context: "attention channels", value: channels, by: heads.max(1) });
        }
        let mk = |rng: &mut ChaCha8Rng| {
            if conv_projection {
                Projection::conv(rng, channels)
            } else {
                Projection::linear(rng, channels)
            }
        };
        Ok(WindowAttention {
            q_proj: mk(rng),
            k_proj: mk(rng),
            v_proj: mk(rng),
            out_proj: Linear::new(rng, channels, channels),
            bias: RelPosBias::new(rng, window, heads),
            heads,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId, q_src: TensorId, spec: &WindowSpec) -> Result<TensorId> {
        self.forward_detailed(t, x, q_src, spec).map(|(out, _)| out)
    }

    /// As [`Self::forward`], additionally returning the attention
    /// probabilities `[B, N, heads, M², M²]`.
    pub fn forward_detailed(
        &self,
        t: &mut Tape,
        x: TensorId,
        q_src: TensorId,
        spec: &WindowSpec,
    ) -> Result<(TensorId, TensorId)> {
        let xs = t.shape(x).to_vec();
        if t.shape(q_src) != xs.as_slice() {
            return Err(TensorError::ShapeMismatch {
                context: "window_attention",
                detail: format!("q_src shape {:?} must match x shape {:?}", t.shape(q_src), xs),
            });
        }
        let batch = xs[0];
        let q = self.q_proj.apply(t, q_src)?;
        let k = self.k_proj.apply(t, x)?;
        let v = self.v_proj.apply(t, x)?;
        let qw = window_partition(t, q, spec)?;
        let kw = window_partition(t, k, spec)?;
        let vw = window_partition(t, v, spec)?;
        let bias = self.bias.lookup(t)?;
        let mask = if spec.shift > 0 {
            let m = build_shift_mask(spec)?;
            let n = spec.num_windows();
            let m2 = spec.tokens_per_window();
            let c = t.constant(m);
            Some(t.reshape(c, vec![n, 1, m2, m2])?)
        } else {
            None
        };
        let (merged, probs) =
            attend_windows(t, qw, kw, vw, self.heads, batch, spec.num_windows(), Some(bias), mask)?;
        let projected = self.out_proj.forward(t, merged)?;
        let out = window_reverse(t, projected, spec, batch)?;
        Ok((out, probs))
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.q_proj.collect_params(&format!("{prefix}.q"), out);
        self.k_proj.collect_params(&format!("{prefix}.k"), out);
        self.v_proj.collect_params(&format!("{prefix}.v"), out);
        self.out_proj.collect_params(&format!("{prefix}.out"), out);
        self.bias.collect_params(&format!("{prefix}.bias"), out);
    }
}
