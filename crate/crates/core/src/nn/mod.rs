//! Building blocks of the segmentation network: parameters and their
//! initialization, the basic layers (linear, conv, layer/batch norm, MLP),
//! window machinery, attention and the encoder/decoder block pairs.

mod attention;
mod blocks;
mod windows;

#[cfg(test)]
mod tests;

pub use attention::{attend_windows, Projection, WindowAttention};
pub use blocks::{Ddc, DecoderBlockPair, DecoderMode, Duc, EncoderBlockPair, Mlp, TransformerBlock};
pub use windows::{build_shift_mask, relative_index, window_partition, window_reverse, RelPosBias, WindowSpec, MASK_VALUE};

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorId};

type Result<T> = std::result::Result<T, crate::tensor::TensorError>;

static NEXT_PARAM_UID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with a process-unique identity, so a parameter used
/// several times in one step still accumulates into a single gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    uid: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, uid: NEXT_PARAM_UID.fetch_add(1, Ordering::Relaxed) }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn register(&self, tape: &mut Tape) -> TensorId {
        tape.param(self.uid, &self.value)
    }

    pub fn grad<'t>(&self, tape: &'t Tape) -> Option<&'t [f64]> {
        tape.grad_for_param(self.uid)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Mutable view of the underlying buffer (copy-on-write if shared).
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        std::sync::Arc::make_mut(&mut self.value.data)
    }

    /// Replace the value, keeping identity; shape must match.
    pub fn assign(&mut self, value: Tensor) -> Result<()> {
        if value.shape != self.value.shape {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                context: "param assign",
                detail: format!("expected {:?}, got {:?}", self.value.shape, value.shape),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// One draw from N(0, 1) via Box-Muller, on the given stream.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// N(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = standard_normal(rng) * std;
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

pub fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Weight initialization scale shared by all projection layers.
pub const INIT_STD: f64 = 0.02;

// ── Token layout helpers ────────────────────────────────────────────────

/// `[B,C,H,W] → [B, H·W, C]` (row-major tokens, channels last).
pub fn to_tokens(t: &mut Tape, x: TensorId) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    debug_assert_eq!(s.len(), 4);
    let p = t.permute(x, &[0, 2, 3, 1])?;
    t.reshape(p, vec![s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C] → [B,C,H,W]`, inverse of [`to_tokens`].
pub fn to_chw(t: &mut Tape, tokens: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let s = t.shape(tokens).to_vec();
    debug_assert_eq!(s.len(), 3);
    let r = t.reshape(tokens, vec![s[0], h, w, s[2]])?;
    t.permute(r, &[0, 3, 1, 2])
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Per-token affine map. Weight layout `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Param::new(trunc_normal(rng, vec![d_in, d_out], INIT_STD)),
            bias: Param::new(Tensor::zeros(vec![d_out])),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = self.weight.register(t);
        let b = self.bias.register(t);
        let y = t.matmul(x, w)?;
        t.add(y, b)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        Conv2dLayer {
            weight: Param::new(trunc_normal(rng, vec![c_out, c_in / groups, kernel, kernel], INIT_STD)),
            bias: Param::new(Tensor::zeros(vec![c_out])),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let w = self.weight.register(t);
        let b = self.bias.register(t);
        t.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(dim: usize) -> Self {
        LayerNormLayer {
            gamma: Param::new(Tensor::ones(vec![dim])),
            beta: Param::new(Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let g = self.gamma.register(t);
        let b = self.beta.register(t);
        t.layer_norm(x, g, b, self.eps)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Running statistics of a batch-norm layer. Updated during training
/// forward passes, frozen in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running: RefCell<BnStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::ones(vec![channels])),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running: RefCell::new(BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId, train: bool) -> Result<TensorId> {
        let g = self.gamma.register(t);
        let b = self.beta.register(t);
        if train {
            let s = t.shape(x).to_vec();
            let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
            let (mean, var) = crate::tensor::kernels::batch_stats(t.data(x), batch, c, plane);
            {
                // running update uses the unbiased variance estimate
                let n = (batch * plane) as f64;
                let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let mut run = self.running.borrow_mut();
                for i in 0..c {
                    run.mean[i] = (1.0 - self.momentum) * run.mean[i] + self.momentum * mean[i];
                    run.var[i] = (1.0 - self.momentum) * run.var[i] + self.momentum * var[i] * bessel;
                }
            }
            t.batch_norm_train(x, g, b, self.eps)
        } else {
            let c = self.gamma.value.numel();
            let run = self.running.borrow();
            let mean = t.constant(Tensor::new(vec![c, 1, 1], run.mean.clone())?);
            let inv_std: Vec<f64> = run.var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
            let inv_std = t.constant(Tensor::new(vec![c, 1, 1], inv_std)?);
            drop(run);
            let g3 = t.reshape(g, vec![c, 1, 1])?;
            let b3 = t.reshape(b, vec![c, 1, 1])?;
            let centered = t.sub(x, mean)?;
            let xhat = t.mul(centered, inv_std)?;
            let scaled = t.mul(xhat, g3)?;
            t.add(scaled, b3)
        }
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a RefCell<BnStats>)>) {
        out.push((prefix.to_string(), &self.running));
    }
}
