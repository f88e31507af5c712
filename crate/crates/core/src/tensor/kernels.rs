//! Raw numeric kernels operating on flat `f64` slices.
//!
//! Everything here is shape-checked by the caller (the tape ops); kernels
//! assume consistent inputs and run plain deterministic loops so that
//! identical inputs always produce bit-identical outputs.

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Broadcast shape under trailing-dimension (numpy) rules, or `None`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        let da = if d < ndim - a.len() { 1 } else { a[d - (ndim - a.len())] };
        let db = if d < ndim - b.len() { 1 } else { b[d - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[d] = da.max(db);
    }
    Some(out)
}

/// Strides of `shape` padded on the left to `ndim` dims, with stride 0 on
/// broadcast (size-1 or missing) dimensions.
pub fn broadcast_strides(shape: &[usize], ndim: usize) -> Vec<usize> {
    let own = strides_for(shape);
    let mut out = vec![0usize; ndim];
    let offset = ndim - shape.len();
    for d in 0..shape.len() {
        out[offset + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    out
}

/// Walk every flat index of `shape`, tracking one strided offset.
pub fn for_each_offset1(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let ndim = shape.len();
    let n: usize = shape.iter().product();
    let mut coords = vec![0usize; ndim];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            off += strides[d];
            if coords[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            coords[d] = 0;
        }
    }
}

/// Walk every flat index of `shape`, tracking two strided offsets.
pub fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let ndim = shape.len();
    let n: usize = shape.iter().product();
    let mut coords = vec![0usize; ndim];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if coords[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            coords[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting. `out_shape` must come from
/// [`broadcast_shape`].
pub fn binary_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape.len());
    let sb = broadcast_strides(b_shape, out_shape.len());
    let mut out = vec![0.0; n];
    for_each_offset2(out_shape, &sa, &sb, |i, oa, ob| {
        out[i] = f(a[oa], b[ob]);
    });
    out
}

/// Sum `grad` (laid out as `from_shape`) down to `to_shape`, undoing a
/// broadcast.
pub fn reduce_broadcast_grad(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let numel: usize = to_shape.iter().product();
    let mut out = vec![0.0; numel];
    let st = broadcast_strides(to_shape, from_shape.len());
    for_each_offset1(from_shape, &st, |i, o| {
        out[o] += grad[i];
    });
    out
}

// ── Matrix products ─────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n], accumulated into `c`.
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ, accumulated into `c`.
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// C[m,n] = A[k,m]ᵀ · B[k,n], accumulated into `c`.
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

// ── Softmax ─────────────────────────────────────────────────────────────

/// Numerically stabilized softmax along `axis`.
pub fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

/// dX for softmax: s ⊙ (dY − ⟨dY, s⟩ along axis).
pub fn softmax_backward(grad: &[f64], y: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                let idx = base + a * inner;
                dot += grad[idx] * y[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (grad[idx] - dot);
            }
        }
    }
    dx
}

// ── Layer normalization (last dimension) ────────────────────────────────

pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    dim: usize,
    eps: f64,
) -> Vec<f64> {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * dim..(r + 1) * dim];
        let mean = xs.iter().sum::<f64>() / dim as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            out[r * dim + j] = (xs[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    grad: &[f64],
    x: &[f64],
    gamma: &[f64],
    dim: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let d_f = dim as f64;
    let mut xhat = vec![0.0; dim];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xs = &x[r * dim..(r + 1) * dim];
        let gs = &grad[r * dim..(r + 1) * dim];
        let mean = xs.iter().sum::<f64>() / d_f;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d_f;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            xhat[j] = (xs[j] - mean) * inv_std;
            dxhat[j] = gs[j] * gamma[j];
            dgamma[j] += gs[j] * xhat[j];
            dbeta[j] += gs[j];
        }
        let dxhat_sum: f64 = dxhat.iter().sum();
        let dxhat_dot: f64 = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
        for j in 0..dim {
            dx[r * dim + j] = inv_std / d_f * (d_f * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
        }
    }
    (dx, dgamma, dbeta)
}

// ── Batch normalization over (B, H, W) per channel ──────────────────────

/// Per-channel biased batch statistics of a [B,C,H,W] tensor.
pub fn batch_stats(x: &[f64], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                s += x[base + p];
            }
        }
        mean[c] = s / n;
    }
    for c in 0..channels {
        let m = mean[c];
        let mut s = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                let d = x[base + p] - m;
                s += d * d;
            }
        }
        var[c] = s / n;
    }
    (mean, var)
}

pub fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let scale = gamma[c] * inv_std;
        let shift = beta[c] - mean[c] * scale;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                out[base + p] = x[base + p] * scale + shift;
            }
        }
    }
    out
}

/// Backward through training-mode batch norm (batch statistics participate).
/// Returns (dx, dgamma, dbeta).
pub fn batch_norm_backward(
    grad: &[f64],
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let m = mean[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                let xhat = (x[base + p] - m) * inv_std;
                let dy = grad[base + p];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * inv_std;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for p in 0..plane {
                let xhat = (x[base + p] - m) * inv_std;
                let dy = grad[base + p];
                dx[base + p] = k * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── Convolution (cross-correlation) ─────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_spatial(h: usize, k: usize, stride: usize, padding: usize) -> usize {
        (h + 2 * padding - k) / stride + 1
    }
}

/// Valid output range `[lo, hi)` so that `o*stride + k - padding` stays
/// inside `[0, extent)`.
fn out_range(extent: usize, out_extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let hi = if extent + padding > k {
        ((extent + padding - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.c_out * d.oh * d.ow];
    if let Some(bias) = bias {
        for b in 0..d.batch {
            for co in 0..d.c_out {
                let base = (b * d.c_out + co) * d.oh * d.ow;
                out[base..base + d.oh * d.ow].fill(bias[co]);
            }
        }
    }
    if d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0 {
        // 1x1 convs are plain per-group matrix products over the plane.
        let cig = d.c_in / d.groups;
        let cog = d.c_out / d.groups;
        let plane = d.h * d.w;
        for b in 0..d.batch {
            for g in 0..d.groups {
                let xg = &x[(b * d.c_in + g * cig) * plane..(b * d.c_in + (g + 1) * cig) * plane];
                let wg = &w[g * cog * cig..(g + 1) * cog * cig];
                let og = &mut out[(b * d.c_out + g * cog) * plane..(b * d.c_out + (g + 1) * cog) * plane];
                mm_nn(wg, xg, og, cog, cig, plane);
            }
        }
        return out;
    }
    let cig = d.c_in / d.groups;
    let cog = d.c_out / d.groups;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / cog;
            let obase = (b * d.c_out + co) * d.oh * d.ow;
            for ci_g in 0..cig {
                let ci = g * cig + ci_g;
                let xbase = (b * d.c_in + ci) * d.h * d.w;
                let wbase = (co * cig + ci_g) * d.kh * d.kw;
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = out_range(d.h, d.oh, kh, d.stride, d.padding);
                    for kw in 0..d.kw {
                        let wv = w[wbase + kh * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = out_range(d.w, d.ow, kw, d.stride, d.padding);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.padding;
                            let xrow = xbase + ih * d.w;
                            let orow = obase + oh * d.ow;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * d.stride + kw - d.padding;
                                out[orow + ow] += wv * x[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn conv2d_backward(
    grad: &[f64],
    x: &[f64],
    w: &[f64],
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let cig = d.c_in / d.groups;
    let cog = d.c_out / d.groups;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let db = if has_bias {
        let mut db = vec![0.0; d.c_out];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                let base = (b * d.c_out + co) * d.oh * d.ow;
                db[co] += grad[base..base + d.oh * d.ow].iter().sum::<f64>();
            }
        }
        Some(db)
    } else {
        None
    };

    if d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0 {
        let plane = d.h * d.w;
        for b in 0..d.batch {
            for g in 0..d.groups {
                let xg = &x[(b * d.c_in + g * cig) * plane..(b * d.c_in + (g + 1) * cig) * plane];
                let wg = &w[g * cog * cig..(g + 1) * cog * cig];
                let gg = &grad[(b * d.c_out + g * cog) * plane..(b * d.c_out + (g + 1) * cog) * plane];
                // dW[cog,cig] += dOut[cog,plane] · X[cig,plane]ᵀ
                mm_nt(gg, xg, &mut dw[g * cog * cig..(g + 1) * cog * cig], cog, plane, cig);
                // dX[cig,plane] += W[cog,cig]ᵀ · dOut[cog,plane]
                mm_tn(
                    wg,
                    gg,
                    &mut dx[(b * d.c_in + g * cig) * plane..(b * d.c_in + (g + 1) * cig) * plane],
                    cig,
                    cog,
                    plane,
                );
            }
        }
        return (dx, dw, db);
    }

    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / cog;
            let obase = (b * d.c_out + co) * d.oh * d.ow;
            for ci_g in 0..cig {
                let ci = g * cig + ci_g;
                let xbase = (b * d.c_in + ci) * d.h * d.w;
                let wbase = (co * cig + ci_g) * d.kh * d.kw;
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = out_range(d.h, d.oh, kh, d.stride, d.padding);
                    for kw in 0..d.kw {
                        let (ow_lo, ow_hi) = out_range(d.w, d.ow, kw, d.stride, d.padding);
                        let wv = w[wbase + kh * d.kw + kw];
                        let mut dwv = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.padding;
                            let xrow = xbase + ih * d.w;
                            let orow = obase + oh * d.ow;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * d.stride + kw - d.padding;
                                let gv = grad[orow + ow];
                                dwv += gv * x[xrow + iw];
                                dx[xrow + iw] += gv * wv;
                            }
                        }
                        dw[wbase + kh * d.kw + kw] += dwv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ── Pixel shuffle / unshuffle ───────────────────────────────────────────

/// [B, C·r², H, W] → [B, C, H·r, W·r].
pub fn pixel_shuffle(x: &[f64], batch: usize, c_out: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (oh, ow) = (h * r, w * r);
    for b in 0..batch {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let ci = c * r * r + i * r + j;
                    let ibase = (b * c_out * r * r + ci) * h * w;
                    let obase = (b * c_out + c) * oh * ow;
                    for y in 0..h {
                        let irow = ibase + y * w;
                        let orow = obase + (y * r + i) * ow + j;
                        for xcol in 0..w {
                            out[orow + xcol * r] = x[irow + xcol];
                        }
                    }
                }
            }
        }
    }
    out
}

/// [B, C, H·r, W·r] → [B, C·r², H, W]. Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &[f64], batch: usize, c_in: usize, oh: usize, ow: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (h, w) = (oh / r, ow / r);
    for b in 0..batch {
        for c in 0..c_in {
            for i in 0..r {
                for j in 0..r {
                    let co = c * r * r + i * r + j;
                    let obase = (b * c_in * r * r + co) * h * w;
                    let ibase = (b * c_in + c) * oh * ow;
                    for y in 0..h {
                        let orow = obase + y * w;
                        let irow = ibase + (y * r + i) * ow + j;
                        for xcol in 0..w {
                            out[orow + xcol] = x[irow + xcol * r];
                        }
                    }
                }
            }
        }
    }
    out
}

// ── Cyclic roll over the trailing two axes ──────────────────────────────

pub fn roll2d(x: &[f64], planes: usize, h: usize, w: usize, dh: isize, dw: isize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let dh = dh.rem_euclid(h as isize) as usize;
    let dw = dw.rem_euclid(w as isize) as usize;
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            let sy = (y + h - dh) % h;
            let src = base + sy * w;
            let dst = base + y * w;
            // out[y][x] = in[y-dh][x-dw]: copy the source row in two runs.
            out[dst + dw..dst + w].copy_from_slice(&x[src..src + (w - dw)]);
            out[dst..dst + dw].copy_from_slice(&x[src + (w - dw)..src + w]);
        }
    }
    out
}

// ── Axis reductions ─────────────────────────────────────────────────────

/// Sum over `axes`; output laid out as `shape` with 1s at the reduced axes.
pub fn sum_axes(x: &[f64], shape: &[usize], axes: &[bool]) -> Vec<f64> {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(axes.iter())
        .map(|(&s, &red)| if red { 1 } else { s })
        .collect();
    let mut st = strides_for(&out_shape);
    for (d, &red) in axes.iter().enumerate() {
        if red {
            st[d] = 0;
        }
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_offset1(shape, &st, |i, o| {
        out[o] += x[i];
    });
    out
}

/// Gradient of [`sum_axes`]: broadcast the reduced grad back to `shape`.
pub fn sum_axes_backward(grad: &[f64], shape: &[usize], axes: &[bool]) -> Vec<f64> {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(axes.iter())
        .map(|(&s, &red)| if red { 1 } else { s })
        .collect();
    let mut st = strides_for(&out_shape);
    for (d, &red) in axes.iter().enumerate() {
        if red {
            st[d] = 0;
        }
    }
    let mut out = vec![0.0; shape.iter().product()];
    for_each_offset1(shape, &st, |i, o| {
        out[i] = grad[o];
    });
    out
}
