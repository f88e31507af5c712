//! Window tiling, the shifted-window attention mask and the learnable
//! relative position bias.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{normal, Param};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

/// Additive mask value for token pairs that must not attend; large but
/// finite so gradients stay well defined.
pub const MASK_VALUE: f64 = -1e9;

/// Square window tiling of an H×W feature map, optionally cyclically
/// shifted by half a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize, height: usize, width: usize) -> Result<Self> {
        if window == 0 {
            return Err(TensorError::InvalidArgument { context: "window spec", detail: "window must be >= 1".into() });
        }
        if height % window != 0 {
            return Err(TensorError::Divisibility { context: "window height", value: height, by: window });
        }
        if width % window != 0 {
            return Err(TensorError::Divisibility { context: "window width", value: width, by: window });
        }
        if shift != 0 && shift != window / 2 {
            return Err(TensorError::InvalidArgument {
                context: "window spec",
                detail: format!("shift must be 0 or {}, got {shift}", window / 2),
            });
        }
        Ok(WindowSpec { window, shift, height, width })
    }

    pub fn regular(window: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(window, 0, height, width)
    }

    pub fn shifted(window: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(window, window / 2, height, width)
    }

    pub fn windows_y(&self) -> usize {
        self.height / self.window
    }

    pub fn windows_x(&self) -> usize {
        self.width / self.window
    }

    /// The number of windows tiling the map.
    pub fn num_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// `[B,C,H,W] → [B·N, M², C]`: cyclic roll by (−shift, −shift), then tile
/// into windows, tokens row-major within each window, windows row-major
/// over the grid.
pub fn window_partition(t: &mut Tape, x: TensorId, spec: &WindowSpec) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    if s.len() != 4 || s[2] != spec.height || s[3] != spec.width {
        return Err(TensorError::ShapeMismatch {
            context: "window_partition",
            detail: format!("expected [B,C,{},{}], got {s:?}", spec.height, spec.width),
        });
    }
    let (b, c, m) = (s[0], s[1], spec.window);
    let x = if spec.shift > 0 {
        t.roll2d(x, -(spec.shift as isize), -(spec.shift as isize))?
    } else {
        x
    };
    let (wy, wx) = (spec.windows_y(), spec.windows_x());
    let r = t.reshape(x, vec![b, c, wy, m, wx, m])?;
    let p = t.permute(r, &[0, 2, 4, 3, 5, 1])?;
    t.reshape(p, vec![b * wy * wx, m * m, c])
}

/// `[B·N, M², C] → [B,C,H,W]`: exact inverse of [`window_partition`],
/// including undoing the cyclic shift.
pub fn window_reverse(t: &mut Tape, tokens: TensorId, spec: &WindowSpec, batch: usize) -> Result<TensorId> {
    let s = t.shape(tokens).to_vec();
    let m = spec.window;
    let (wy, wx) = (spec.windows_y(), spec.windows_x());
    if s.len() != 3 || s[0] != batch * wy * wx || s[1] != m * m {
        return Err(TensorError::ShapeMismatch {
            context: "window_reverse",
            detail: format!("expected [{}, {}, C] tokens, got {s:?}", batch * wy * wx, m * m),
        });
    }
    let c = s[2];
    let r = t.reshape(tokens, vec![batch, wy, wx, m, m, c])?;
    let p = t.permute(r, &[0, 5, 1, 3, 2, 4])?;
    let maps = t.reshape(p, vec![batch, c, spec.height, spec.width])?;
    if spec.shift > 0 {
        t.roll2d(maps, spec.shift as isize, spec.shift as isize)
    } else {
        Ok(maps)
    }
}

/// Swin-style attention mask for shifted windows: token pairs whose pixels
/// originate from different pre-roll regions receive [`MASK_VALUE`].
/// Returns a `[N, M², M²]` tensor of 0 / MASK_VALUE entries.
pub fn build_shift_mask(spec: &WindowSpec) -> Result<Tensor> {
    if spec.shift == 0 || spec.shift != spec.window / 2 {
        return Err(TensorError::InvalidArgument {
            context: "shift mask",
            detail: "mask is defined for shift == window/2".into(),
        });
    }
    let (h, w, m, shift) = (spec.height, spec.width, spec.window, spec.shift);
    // Region labels on the rolled canvas; bands follow the roll boundaries.
    let band = |v: usize, extent: usize| -> usize {
        if v < extent - m {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = 3 * band(y, h) + band(x, w);
        }
    }
    let (wy, wx) = (spec.windows_y(), spec.windows_x());
    let m2 = m * m;
    let mut mask = vec![0.0f64; wy * wx * m2 * m2];
    let mut win_labels = vec![0usize; m2];
    for gy in 0..wy {
        for gx in 0..wx {
            for iy in 0..m {
                for ix in 0..m {
                    win_labels[iy * m + ix] = labels[(gy * m + iy) * w + gx * m + ix];
                }
            }
            let base = (gy * wx + gx) * m2 * m2;
            for i in 0..m2 {
                for j in 0..m2 {
                    if win_labels[i] != win_labels[j] {
                        mask[base + i * m2 + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Tensor::new(vec![wy * wx, m2, m2], mask)
}

/// Index map from token pair (i, j) in an M×M window to a row of the bias
/// table, keyed by the relative offset of the two tokens.
pub fn relative_index(window: usize) -> Vec<usize> {
    let m = window;
    let side = 2 * m - 1;
    let mut index = Vec::with_capacity(m * m * m * m);
    for i in 0..m * m {
        let (yi, xi) = (i / m, i % m);
        for j in 0..m * m {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            index.push(dy * side + dx);
        }
    }
    index
}

/// Learnable per-head additive attention bias indexed by relative token
/// offset within a window.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    pub table: Param,
    index: Arc<Vec<usize>>,
    pub window: usize,
    pub heads: usize,
}

impl RelPosBias {
    pub fn new(rng: &mut ChaCha8Rng, window: usize, heads: usize) -> Self {
        let side = 2 * window - 1;
        RelPosBias {
            table: Param::new(normal(rng, vec![side * side, heads], super::INIT_STD)),
            index: Arc::new(relative_index(window)),
            window,
            heads,
        }
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Materialize the bias as `[heads, M², M²]` for addition to attention
    /// logits; gradients scatter back into the table.
    pub fn lookup(&self, t: &mut Tape) -> Result<TensorId> {
        let m2 = self.window * self.window;
        let table = self.table.register(t);
        let rows = t.index_select(table, self.index.clone())?;
        let cube = t.reshape(rows, vec![m2, m2, self.heads])?;
        t.permute(cube, &[2, 0, 1])
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.table"), &mut self.table));
    }
}
