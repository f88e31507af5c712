//! Minimal deterministic N-D tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Values are row-major `f64` buffers. A [`Tape`] records every operation
//! whose inputs require gradients; [`Tape::backward`] replays the recording
//! in reverse to accumulate gradients on the leaves. Ops cover exactly what
//! the segmentation model needs; there is no broadcasting beyond trailing
//! (numpy-style) alignment and no implicit type promotion.

pub mod kernels;


use std::collections::HashMap;
use std::sync::Arc;

use kernels::ConvDims;
use thiserror::Error;

/// Arguments to `log` are clamped to this floor before evaluation, so the
/// losses can take logs of softmax outputs that underflow to zero.
pub const LOG_CLAMP: f64 = 1e-12;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
    #[error("shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    NotBroadcastable { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: &'static str, detail: String },
    #[error("axis {axis} out of bounds for rank {rank}")]
    AxisOutOfBounds { axis: usize, rank: usize },
    #[error("{context}: {value} is not divisible by {by}")]
    Divisibility { context: &'static str, value: usize, by: usize },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("invalid argument in {context}: {detail}")]
    InvalidArgument { context: &'static str, detail: String },
}

fn shape_err(context: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { context, detail }
}

/// An N-D array of 64-bit floats, optionally attached to a gradient tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    /// Populated on requires-grad leaves after `backward`; accumulates
    /// across repeated backward calls.
    pub grad: Option<Vec<f64>>,
    /// Node index in the tape this tensor lives on, if any.
    pub tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, expected, got: data.len() });
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, grad: None, tape_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; n]), requires_grad: false, grad: None, tape_id: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; n]), requires_grad: false, grad: None, tape_id: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), requires_grad: false, grad: None, tape_id: None }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Identifier of a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Matmul { a: usize, b: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    BatchNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Conv2d { x: usize, w: usize, bias: Option<usize>, dims: ConvDims },
    PixelShuffle { x: usize, r: usize },
    PixelUnshuffle { x: usize, r: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Roll2d { x: usize, dh: isize, dw: isize },
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { x: usize, indices: Arc<Vec<usize>> },
    SumAxes { x: usize, axes: Vec<bool> },
    SumAll { x: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } | Op::Matmul { a, b } => {
                vec![*a, *b]
            }
            Op::Neg { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a } => vec![*a],
            Op::Softmax { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Roll2d { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::SumAxes { x, .. }
            | Op::SumAll { x } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

/// Recording of one training-step expression graph. Nodes are stored in
/// topological order (parents always precede children); backward walks the
/// list once, in reverse.
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    param_nodes: HashMap<u64, TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = self.tensors.len();
        // Subgraphs that cannot influence any gradient are recorded as
        // constants so backward skips them entirely.
        let op = if requires_grad { op } else { Op::Leaf };
        self.tensors.push(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: None,
            tape_id: Some(id),
        });
        self.ops.push(op);
        TensorId(id)
    }

    fn push_shared(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Op) -> TensorId {
        let id = self.tensors.len();
        let op = if requires_grad { op } else { Op::Leaf };
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None, tape_id: Some(id) });
        self.ops.push(op);
        TensorId(id)
    }

    /// Record a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push_shared(t.shape, t.data, false, Op::Leaf)
    }

    /// Record a gradient-carrying leaf.
    pub fn variable(&mut self, t: Tensor) -> TensorId {
        self.push_shared(t.shape, t.data, true, Op::Leaf)
    }

    /// Register a parameter leaf, memoized by the parameter's identity so a
    /// parameter used twice in one step accumulates into one gradient.
    pub fn param(&mut self, uid: u64, value: &Tensor) -> TensorId {
        if let Some(&id) = self.param_nodes.get(&uid) {
            return id;
        }
        let id = self.push_shared(value.shape.clone(), value.data.clone(), true, Op::Leaf);
        self.param_nodes.insert(uid, id);
        id
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.tensors[id.0].numel()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.tensors[id.0].data[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn grad_for_param(&self, uid: u64) -> Option<&[f64]> {
        self.param_nodes.get(&uid).and_then(|&id| self.grad(id))
    }

    /// Clone a tensor out of the tape as a detached value.
    pub fn export(&self, id: TensorId) -> Tensor {
        let t = &self.tensors[id.0];
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<TensorId> {
        let (asb, bsb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        let out_shape = kernels::broadcast_shape(asb, bsb).ok_or_else(|| TensorError::NotBroadcastable {
            lhs: asb.clone(),
            rhs: bsb.clone(),
        })?;
        let data = kernels::binary_broadcast(
            &self.tensors[a.0].data,
            &self.tensors[a.0].shape,
            &self.tensors[b.0].data,
            &self.tensors[b.0].shape,
            &out_shape,
            f,
        );
        let rg = self.tensors[a.0].requires_grad || self.tensors[b.0].requires_grad;
        Ok(self.push(out_shape, data, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.tensors[a.0].shape.clone();
        let rg = self.tensors[a.0].requires_grad;
        self.push(shape, data, rg, op)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    /// Natural log with the argument clamped to [`LOG_CLAMP`].
    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(LOG_CLAMP).ln(), Op::Log { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, gelu_value, Op::Gelu { a: a.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] · [.., k, n] → [.., m, n]`.
    /// The right operand may be rank-2, in which case it broadcasts over the
    /// left operand's batch dimensions.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ash = self.tensors[a.0].shape.clone();
        let bsh = self.tensors[b.0].shape.clone();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be rank >= 2, got {ash:?} and {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dimensions differ: {ash:?} vs {bsh:?}")));
        }
        let batch_a: usize = ash[..ash.len() - 2].iter().product();
        let broadcast_b = bsh.len() == 2 && ash.len() > 2;
        if !broadcast_b && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(shape_err("matmul", format!("batch dimensions differ: {ash:?} vs {bsh:?}")));
        }
        let mut out = vec![0.0; batch_a * m * n];
        let ad = &self.tensors[a.0].data;
        let bd = &self.tensors[b.0].data;
        for i in 0..batch_a {
            let bb = if broadcast_b { &bd[..] } else { &bd[i * k * n..(i + 1) * k * n] };
            kernels::mm_nn(&ad[i * m * k..(i + 1) * m * k], bb, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.tensors[a.0].requires_grad || self.tensors[b.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.tensors[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds { axis, rank: shape.len() });
        }
        let data = kernels::softmax_forward(&self.tensors[a.0].data, &shape, axis);
        let rg = self.tensors[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Softmax { a: a.0, axis }))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        let dim = *shape.last().ok_or_else(|| shape_err("layer_norm", "input must have rank >= 1".into()))?;
        if self.tensors[gamma.0].shape != [dim] || self.tensors[beta.0].shape != [dim] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma/beta must have shape [{dim}], got {:?} and {:?}",
                    self.tensors[gamma.0].shape, self.tensors[beta.0].shape
                ),
            ));
        }
        let data = kernels::layer_norm_forward(
            &self.tensors[x.0].data,
            &self.tensors[gamma.0].data,
            &self.tensors[beta.0].data,
            dim,
            eps,
        );
        let rg = self.tensors[x.0].requires_grad
            || self.tensors[gamma.0].requires_grad
            || self.tensors[beta.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    /// Training-mode batch norm over a `[B,C,H,W]` tensor: normalizes with
    /// the batch statistics, which therefore participate in the gradient.
    pub fn batch_norm_train(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(shape_err("batch_norm", format!("expected [B,C,H,W], got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.tensors[gamma.0].shape != [c] || self.tensors[beta.0].shape != [c] {
            return Err(shape_err("batch_norm", format!("affine params must have shape [{c}]")));
        }
        let (mean, var) = kernels::batch_stats(&self.tensors[x.0].data, b, c, h * w);
        let data = kernels::batch_norm_forward(
            &self.tensors[x.0].data,
            &self.tensors[gamma.0].data,
            &self.tensors[beta.0].data,
            &mean,
            &var,
            eps,
            b,
            c,
            h * w,
        );
        let rg = self.tensors[x.0].requires_grad
            || self.tensors[gamma.0].requires_grad
            || self.tensors[beta.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    /// 2-D cross-correlation with stride, symmetric zero padding and groups.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.tensors[x.0].shape.clone();
        let ws = self.tensors[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("expected x [B,C,H,W] and w [O,I,kh,kw], got {xs:?} and {ws:?}")));
        }
        let (b, c_in, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(TensorError::Divisibility { context: "conv2d groups", value: c_in, by: groups.max(1) });
        }
        if cig != c_in / groups {
            return Err(shape_err(
                "conv2d",
                format!("weight in-channels {cig} do not match input channels {c_in} / groups {groups}"),
            ));
        }
        if h + 2 * padding < kh || wid + 2 * padding < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} does not fit padded input {h}x{wid} (pad {padding})")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { context: "conv2d", detail: "stride must be >= 1".into() });
        }
        if let Some(bid) = bias {
            if self.tensors[bid.0].shape != [c_out] {
                return Err(shape_err("conv2d", format!("bias must have shape [{c_out}]")));
            }
        }
        let dims = ConvDims {
            batch: b,
            c_in,
            h,
            w: wid,
            c_out,
            kh,
            kw,
            stride,
            padding,
            groups,
            oh: ConvDims::out_spatial(h, kh, stride, padding),
            ow: ConvDims::out_spatial(wid, kw, stride, padding),
        };
        let bias_data = bias.map(|bid| self.tensors[bid.0].data.clone());
        let data = kernels::conv2d_forward(
            &self.tensors[x.0].data,
            &self.tensors[w.0].data,
            bias_data.as_ref().map(|a| a.as_slice()),
            &dims,
        );
        let mut rg = self.tensors[x.0].requires_grad || self.tensors[w.0].requires_grad;
        if let Some(bid) = bias {
            rg |= self.tensors[bid.0].requires_grad;
        }
        let shape = vec![b, dims.c_out, dims.oh, dims.ow];
        Ok(self.push(shape, data, rg, Op::Conv2d { x: x.0, w: w.0, bias: bias.map(|b| b.0), dims }))
    }

    // ── Rearrangement ───────────────────────────────────────────────────

    /// `[B, C·r², H, W] → [B, C, H·r, W·r]`; bijective channel-to-space move.
    pub fn pixel_shuffle(&mut self, x: TensorId, r: usize) -> Result<TensorId> {
        let s = self.tensors[x.0].shape.clone();
        if s.len() != 4 {
            return Err(shape_err("pixel_shuffle", format!("expected [B,C,H,W], got {s:?}")));
        }
        if r == 0 || s[1] % (r * r) != 0 {
            return Err(TensorError::Divisibility { context: "pixel_shuffle channels", value: s[1], by: r.max(1) * r.max(1) });
        }
        let c_out = s[1] / (r * r);
        let data = kernels::pixel_shuffle(&self.tensors[x.0].data, s[0], c_out, s[2], s[3], r);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(vec![s[0], c_out, s[2] * r, s[3] * r], data, rg, Op::PixelShuffle { x: x.0, r }))
    }

    /// `[B, C, H·r, W·r] → [B, C·r², H, W]`; exact inverse of pixel_shuffle.
    pub fn pixel_unshuffle(&mut self, x: TensorId, r: usize) -> Result<TensorId> {
        let s = self.tensors[x.0].shape.clone();
        if s.len() != 4 {
            return Err(shape_err("pixel_unshuffle", format!("expected [B,C,H,W], got {s:?}")));
        }
        if r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(TensorError::Divisibility { context: "pixel_unshuffle spatial", value: s[2], by: r.max(1) });
        }
        let data = kernels::pixel_unshuffle(&self.tensors[x.0].data, s[0], s[1], s[2], s[3], r);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(vec![s[0], s[1] * r * r, s[2] / r, s[3] / r], data, rg, Op::PixelUnshuffle { x: x.0, r }))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.tensors[x.0].numel() {
            return Err(TensorError::DataLength { shape: new_shape, expected: numel, got: self.tensors[x.0].numel() });
        }
        let data = self.tensors[x.0].data.clone();
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_shared(new_shape, data, rg, Op::Reshape { x: x.0 }))
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        let ndim = shape.len();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                context: "permute",
                detail: format!("{perm:?} is not a permutation of 0..{ndim}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = kernels::strides_for(&shape);
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = &self.tensors[x.0].data;
        let mut out = vec![0.0; src.len()];
        kernels::for_each_offset1(&out_shape, &walk, |i, o| out[i] = src[o]);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Permute { x: x.0, perm: perm.to_vec() }))
    }

    /// Cyclic shift of the trailing two axes by (dh, dw).
    pub fn roll2d(&mut self, x: TensorId, dh: isize, dw: isize) -> Result<TensorId> {
        let s = self.tensors[x.0].shape.clone();
        if s.len() < 2 {
            return Err(shape_err("roll2d", format!("expected rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let data = kernels::roll2d(&self.tensors[x.0].data, planes, h, w, dh, dw);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(s, data, rg, Op::Roll2d { x: x.0, dh, dw }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { context: "concat", detail: "no inputs".into() });
        }
        let first = self.tensors[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfBounds { axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.tensors[p.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(shape_err("concat", format!("incompatible shapes {first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let s_axis = self.tensors[p.0].shape[axis];
            let row_in = s_axis * inner;
            let src = &self.tensors[p.0].data;
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + row_in]
                    .copy_from_slice(&src[o * row_in..(o + 1) * row_in]);
            }
            offset += row_in;
        }
        let rg = parts.iter().any(|p| self.tensors[p.0].requires_grad);
        Ok(self.push(out_shape, out, rg, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }))
    }

    /// Select rows (axis 0) by index; gradients scatter-add into the source.
    pub fn index_select(&mut self, x: TensorId, indices: Arc<Vec<usize>>) -> Result<TensorId> {
        let s = self.tensors[x.0].shape.clone();
        if s.is_empty() {
            return Err(shape_err("index_select", "input must have rank >= 1".into()));
        }
        let rows = s[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                context: "index_select",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row: usize = s[1..].iter().product();
        let src = &self.tensors[x.0].data;
        let mut out = vec![0.0; indices.len() * row];
        for (k, &i) in indices.iter().enumerate() {
            out[k * row..(k + 1) * row].copy_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&s[1..]);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::IndexSelect { x: x.0, indices }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_axes(&mut self, x: TensorId, axes: &[usize], keepdims: bool) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        let mut mask = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::AxisOutOfBounds { axis: a, rank: shape.len() });
            }
            mask[a] = true;
        }
        let data = kernels::sum_axes(&self.tensors[x.0].data, &shape, &mask);
        let out_shape: Vec<usize> = if keepdims {
            shape.iter().zip(mask.iter()).map(|(&s, &m)| if m { 1 } else { s }).collect()
        } else {
            shape
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| !m)
                .map(|(&s, _)| s)
                .collect()
        };
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::SumAxes { x: x.0, axes: mask }))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.tensors[x.0].data.iter().sum();
        let rg = self.tensors[x.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.tensors[x.0].numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Same values, no gradient connection.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let t = &self.tensors[x.0];
        let (shape, data) = (t.shape.clone(), t.data.clone());
        self.push_shared(shape, data, false, Op::Leaf)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every requires-grad leaf
    /// reachable from `loss` receives dLoss/dLeaf; repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss { numel: self.numel(loss) });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.tensors[i].requires_grad {
                continue;
            }
            let op = self.ops[i].clone();
            if matches!(op, Op::Leaf) {
                let slot = self.tensors[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (acc, gv) in slot.iter_mut().zip(g.iter()) {
                    *acc += gv;
                }
                continue;
            }
            let contributions = self.op_backward(&op, i, &g);
            for (parent, contrib) in op.parents().into_iter().zip(contributions.into_iter()) {
                let Some(contrib) = contrib else { continue };
                if !self.tensors[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions to each parent of node `i`, in `parents()`
    /// order. `None` marks a parent that does not require grad (skipped).
    fn op_backward(&self, op: &Op, i: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let t = |id: usize| &self.tensors[id];
        let needs = |id: usize| self.tensors[id].requires_grad;
        let out_shape = &self.tensors[i].shape;
        match *op {
            Op::Leaf => vec![],
            Op::Add { a, b } => {
                let da = needs(a).then(|| kernels::reduce_broadcast_grad(g, out_shape, &t(a).shape));
                let db = needs(b).then(|| kernels::reduce_broadcast_grad(g, out_shape, &t(b).shape));
                vec![da, db]
            }
            Op::Sub { a, b } => {
                let da = needs(a).then(|| kernels::reduce_broadcast_grad(g, out_shape, &t(a).shape));
                let db = needs(b).then(|| {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    kernels::reduce_broadcast_grad(&neg, out_shape, &t(b).shape)
                });
                vec![da, db]
            }
            Op::Mul { a, b } => {
                let sa = kernels::broadcast_strides(&t(a).shape, out_shape.len());
                let sb = kernels::broadcast_strides(&t(b).shape, out_shape.len());
                let (ad, bd) = (&t(a).data, &t(b).data);
                let da = needs(a).then(|| {
                    let mut full = vec![0.0; g.len()];
                    kernels::for_each_offset2(out_shape, &sa, &sb, |k, _, ob| full[k] = g[k] * bd[ob]);
                    kernels::reduce_broadcast_grad(&full, out_shape, &t(a).shape)
                });
                let db = needs(b).then(|| {
                    let mut full = vec![0.0; g.len()];
                    kernels::for_each_offset2(out_shape, &sa, &sb, |k, oa, _| full[k] = g[k] * ad[oa]);
                    kernels::reduce_broadcast_grad(&full, out_shape, &t(b).shape)
                });
                vec![da, db]
            }
            Op::Div { a, b } => {
                let sa = kernels::broadcast_strides(&t(a).shape, out_shape.len());
                let sb = kernels::broadcast_strides(&t(b).shape, out_shape.len());
                let (ad, bd) = (&t(a).data, &t(b).data);
                let da = needs(a).then(|| {
                    let mut full = vec![0.0; g.len()];
                    kernels::for_each_offset2(out_shape, &sa, &sb, |k, _, ob| full[k] = g[k] / bd[ob]);
                    kernels::reduce_broadcast_grad(&full, out_shape, &t(a).shape)
                });
                let db = needs(b).then(|| {
                    let mut full = vec![0.0; g.len()];
                    kernels::for_each_offset2(out_shape, &sa, &sb, |k, oa, ob| {
                        full[k] = -g[k] * ad[oa] / (bd[ob] * bd[ob]);
                    });
                    kernels::reduce_broadcast_grad(&full, out_shape, &t(b).shape)
                });
                vec![da, db]
            }
            Op::Neg { a } => vec![needs(a).then(|| g.iter().map(|v| -v).collect())],
            Op::Exp { a } => {
                let y = &self.tensors[i].data;
                vec![needs(a).then(|| g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv).collect())]
            }
            Op::Log { a } => {
                let xd = &t(a).data;
                vec![needs(a).then(|| {
                    g.iter()
                        .zip(xd.iter())
                        .map(|(gv, &x)| if x > LOG_CLAMP { gv / x } else { 0.0 })
                        .collect()
                })]
            }
            Op::Relu { a } => {
                let xd = &t(a).data;
                vec![needs(a).then(|| {
                    g.iter().zip(xd.iter()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect()
                })]
            }
            Op::Gelu { a } => {
                let xd = &t(a).data;
                vec![needs(a).then(|| g.iter().zip(xd.iter()).map(|(gv, &x)| gv * gelu_derivative(x)).collect())]
            }
            Op::Scale { a, c } => vec![needs(a).then(|| g.iter().map(|v| v * c).collect())],
            Op::AddScalar { a } => vec![needs(a).then(|| g.to_vec())],
            Op::Matmul { a, b } => {
                let ash = &t(a).shape;
                let bsh = &t(b).shape;
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let broadcast_b = bsh.len() == 2 && ash.len() > 2;
                let (ad, bd) = (&t(a).data, &t(b).data);
                let da = needs(a).then(|| {
                    let mut da = vec![0.0; ad.len()];
                    for i in 0..batch {
                        let bb = if broadcast_b { &bd[..] } else { &bd[i * k * n..(i + 1) * k * n] };
                        kernels::mm_nt(&g[i * m * n..(i + 1) * m * n], bb, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    da
                });
                let db = needs(b).then(|| {
                    let mut db = vec![0.0; bd.len()];
                    for i in 0..batch {
                        let dst = if broadcast_b { &mut db[..] } else { &mut db[i * k * n..(i + 1) * k * n] };
                        kernels::mm_tn(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], dst, k, m, n);
                    }
                    db
                });
                vec![da, db]
            }
            Op::Softmax { a, axis } => {
                let y = &self.tensors[i].data;
                vec![needs(a).then(|| kernels::softmax_backward(g, y, out_shape, axis))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let dim = *out_shape.last().unwrap();
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(g, &t(x).data, &t(gamma).data, dim, eps);
                vec![
                    needs(x).then_some(dx),
                    needs(gamma).then_some(dgamma),
                    needs(beta).then_some(dbeta),
                ]
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let s = &t(x).shape;
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let (mean, var) = kernels::batch_stats(&t(x).data, b, c, plane);
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                    g,
                    &t(x).data,
                    &t(gamma).data,
                    &mean,
                    &var,
                    eps,
                    b,
                    c,
                    plane,
                );
                vec![
                    needs(x).then_some(dx),
                    needs(gamma).then_some(dgamma),
                    needs(beta).then_some(dbeta),
                ]
            }
            Op::Conv2d { x, w, bias, ref dims } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(g, &t(x).data, &t(w).data, bias.is_some(), dims);
                let mut out = vec![needs(x).then_some(dx), needs(w).then_some(dw)];
                if let Some(b) = bias {
                    out.push(needs(b).then(|| db.unwrap()));
                }
                out
            }
            Op::PixelShuffle { x, r } => {
                let s = out_shape;
                vec![needs(x).then(|| kernels::pixel_unshuffle(g, s[0], s[1], s[2], s[3], r))]
            }
            Op::PixelUnshuffle { x, r } => {
                let s = out_shape;
                vec![needs(x).then(|| kernels::pixel_shuffle(g, s[0], s[1] / (r * r), s[2], s[3], r))]
            }
            Op::Reshape { x } => vec![needs(x).then(|| g.to_vec())],
            Op::Permute { x, ref perm } => {
                vec![needs(x).then(|| {
                    let in_shape = &t(x).shape;
                    let in_strides = kernels::strides_for(in_shape);
                    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let mut dx = vec![0.0; g.len()];
                    kernels::for_each_offset1(out_shape, &walk, |k, o| dx[o] = g[k]);
                    dx
                })]
            }
            Op::Roll2d { x, dh, dw } => {
                let s = out_shape;
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes: usize = s[..s.len() - 2].iter().product();
                vec![needs(x).then(|| kernels::roll2d(g, planes, h, w, -dh, -dw))]
            }
            Op::Concat { ref parts, axis } => {
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row_out = out_shape[axis] * inner;
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let s_axis = t(p).shape[axis];
                        let row_in = s_axis * inner;
                        let res = needs(p).then(|| {
                            let mut dp = vec![0.0; t(p).numel()];
                            for o in 0..outer {
                                dp[o * row_in..(o + 1) * row_in]
                                    .copy_from_slice(&g[o * row_out + offset..o * row_out + offset + row_in]);
                            }
                            dp
                        });
                        offset += row_in;
                        res
                    })
                    .collect()
            }
            Op::IndexSelect { x, ref indices } => {
                vec![needs(x).then(|| {
                    let row: usize = t(x).shape[1..].iter().product();
                    let mut dx = vec![0.0; t(x).numel()];
                    for (k, &idx) in indices.iter().enumerate() {
                        for j in 0..row {
                            dx[idx * row + j] += g[k * row + j];
                        }
                    }
                    dx
                })]
            }
            Op::SumAxes { x, ref axes } => {
                vec![needs(x).then(|| kernels::sum_axes_backward(g, &t(x).shape, axes))]
            }
            Op::SumAll { x } => vec![needs(x).then(|| vec![g[0]; t(x).numel()])],
        }
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.39894228040143267794;
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
