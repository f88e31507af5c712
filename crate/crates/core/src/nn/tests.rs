use super::*;
use crate::gradcheck::check_fn;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_chw(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ── window partition / reverse ──────────────────────────────────────────

#[test]
fn single_window_is_row_major_flatten() {
    let mut t = Tape::new();
    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let x = t.constant(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
    let spec = WindowSpec::regular(4, 4, 4).unwrap();
    let tok = window_partition(&mut t, x, &spec).unwrap();
    assert_eq!(t.shape(tok), &[1, 16, 1]);
    assert_eq!(t.data(tok), &data[..]);
}

#[test]
fn partition_matches_brute_force_gather() {
    let mut r = rng(5);
    let (b, c, h, w, m) = (2, 3, 8, 4, 4);
    let x = rand_chw(&mut r, &[b, c, h, w]);
    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let spec = WindowSpec::regular(m, h, w).unwrap();
    let tok = window_partition(&mut t, xid, &spec).unwrap();
    let out = t.data(tok);
    let (wy, wx) = (h / m, w / m);
    for bi in 0..b {
        for gy in 0..wy {
            for gx in 0..wx {
                for iy in 0..m {
                    for ix in 0..m {
                        for ci in 0..c {
                            let win = (bi * wy + gy) * wx + gx;
                            let token = iy * m + ix;
                            let got = out[(win * m * m + token) * c + ci];
                            let want = x.data[((bi * c + ci) * h + gy * m + iy) * w + gx * m + ix];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn partition_reverse_roundtrip_regular_and_shifted() {
    let mut r = rng(6);
    for &shift in &[0usize, 2] {
        let x = rand_chw(&mut r, &[2, 3, 8, 12]);
        let mut t = Tape::new();
        let xid = t.constant(x.clone());
        let spec = WindowSpec::new(4, shift, 8, 12).unwrap();
        let tok = window_partition(&mut t, xid, &spec).unwrap();
        let back = window_reverse(&mut t, tok, &spec, 2).unwrap();
        assert_eq!(t.data(back), &x.data[..], "shift {shift}");
    }
}

#[test]
fn partition_rejects_indivisible() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 1, 6, 6]));
    assert!(WindowSpec::regular(4, 6, 6).is_err());
    let spec = WindowSpec { window: 4, shift: 0, height: 6, width: 6 };
    assert!(window_partition(&mut t, x, &spec).is_err());
}

// ── shift mask ──────────────────────────────────────────────────────────

/// Wrap-origin oracle: on the rolled canvas, a pixel's pre-roll source is
/// ((y+shift) mod H, (x+shift) mod W); two tokens in a window may attend
/// iff both coordinates wrapped identically.
fn oracle_mask(spec: &WindowSpec) -> Vec<f64> {
    let (h, w, m, s) = (spec.height, spec.width, spec.window, spec.shift);
    let wrapped = |v: usize, extent: usize| (v + s) >= extent;
    let (wy, wx) = (spec.windows_y(), spec.windows_x());
    let m2 = m * m;
    let mut mask = vec![0.0; wy * wx * m2 * m2];
    for gy in 0..wy {
        for gx in 0..wx {
            let mut lab = vec![(false, false); m2];
            for iy in 0..m {
                for ix in 0..m {
                    lab[iy * m + ix] = (wrapped(gy * m + iy, h), wrapped(gx * m + ix, w));
                }
            }
            let base = (gy * wx + gx) * m2 * m2;
            for i in 0..m2 {
                for j in 0..m2 {
                    if lab[i] != lab[j] {
                        mask[base + i * m2 + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    mask
}

#[test]
fn interior_windows_are_unmasked() {
    let spec = WindowSpec::shifted(4, 16, 16).unwrap();
    let mask = build_shift_mask(&spec).unwrap();
    let m2 = 16;
    // window (1,1) is interior on a 4x4 grid of windows
    let win = 1 * spec.windows_x() + 1;
    let block = &mask.data[win * m2 * m2..(win + 1) * m2 * m2];
    assert!(block.iter().all(|&v| v == 0.0));
}

#[test]
fn corner_window_has_four_regions() {
    let m = 4;
    let spec = WindowSpec::shifted(m, 2 * m, 2 * m).unwrap();
    let mask = build_shift_mask(&spec).unwrap();
    assert_eq!(mask.shape, vec![4, 16, 16]);
    assert_eq!(&mask.data[..], &oracle_mask(&spec)[..]);
    // the bottom-right window mixes 4 wrap regions: rows split at M-shift,
    // so token 0 (unwrapped) and the last token (both wrapped) are blocked
    let corner = &mask.data[3 * 256..4 * 256];
    assert_eq!(corner[0 * 16 + 15], MASK_VALUE);
    assert_eq!(corner[0], 0.0);
    let distinct_rows: std::collections::HashSet<Vec<u64>> = (0..16)
        .map(|i| corner[i * 16..(i + 1) * 16].iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(distinct_rows.len(), 4, "corner window should show 4 attention patterns");
}

#[test]
fn shift_mask_matches_oracle_on_rectangles() {
    for &(h, w, m) in &[(8usize, 12usize, 4usize), (8, 8, 2), (12, 8, 4)] {
        let spec = WindowSpec::shifted(m, h, w).unwrap();
        let mask = build_shift_mask(&spec).unwrap();
        assert_eq!(&mask.data[..], &oracle_mask(&spec)[..], "h={h} w={w} m={m}");
    }
}

// ── relative position bias ──────────────────────────────────────────────

#[test]
fn relative_index_in_range_and_mirrored() {
    for m in [2usize, 4, 7] {
        let idx = relative_index(m);
        let side = 2 * m - 1;
        let m2 = m * m;
        assert!(idx.iter().all(|&v| v < side * side));
        for i in 0..m2 {
            for j in 0..m2 {
                let a = idx[i * m2 + j];
                let b = idx[j * m2 + i];
                let (dy_a, dx_a) = (a / side, a % side);
                let (dy_b, dx_b) = (b / side, b % side);
                // offsets negate under (i, j) swap
                assert_eq!(dy_a + dy_b, 2 * (m - 1));
                assert_eq!(dx_a + dx_b, 2 * (m - 1));
            }
        }
    }
}

#[test]
fn relative_index_depends_only_on_offset() {
    let m = 4;
    let idx = relative_index(m);
    let m2 = m * m;
    let at = |i: usize, j: usize| idx[i * m2 + j];
    for yi in 0..m - 1 {
        for xi in 0..m - 1 {
            for yj in 0..m - 1 {
                for xj in 0..m - 1 {
                    let i = yi * m + xi;
                    let j = yj * m + xj;
                    let i2 = (yi + 1) * m + xi + 1;
                    let j2 = (yj + 1) * m + xj + 1;
                    assert_eq!(at(i, j), at(i2, j2), "bias index must be translation invariant");
                }
            }
        }
    }
}

// ── conv projection ─────────────────────────────────────────────────────

fn identity_conv_projection(channels: usize) -> Projection {
    let mut p = Projection::conv(&mut rng(0), channels);
    if let Projection::Conv { depthwise, pointwise } = &mut p {
        let dw = depthwise.weight.data_mut();
        dw.fill(0.0);
        for c in 0..channels {
            dw[c * 9 + 4] = 1.0; // centre tap
        }
        depthwise.bias.data_mut().fill(0.0);
        let pw = pointwise.weight.data_mut();
        pw.fill(0.0);
        for c in 0..channels {
            pw[c * channels + c] = 1.0;
        }
        pointwise.bias.data_mut().fill(0.0);
    }
    p
}

#[test]
fn conv_projection_identity_weights() {
    let mut r = rng(8);
    let x = rand_chw(&mut r, &[1, 3, 5, 7]);
    let proj = identity_conv_projection(3);
    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let y = proj.apply(&mut t, xid).unwrap();
    assert_eq!(t.data(y), &x.data[..]);
}

#[test]
fn conv_projection_preserves_shape() {
    let mut r = rng(9);
    for &(h, w) in &[(4usize, 4usize), (6, 10), (12, 8)] {
        let x = rand_chw(&mut r, &[2, 4, h, w]);
        let proj = Projection::conv(&mut r, 4);
        let mut t = Tape::new();
        let xid = t.constant(x);
        let y = proj.apply(&mut t, xid).unwrap();
        assert_eq!(t.shape(y), &[2, 4, h, w]);
    }
}

#[test]
fn linear_projection_is_permutation_equivariant() {
    // the no-conv-projection ablation acts per token: permuting pixels
    // before equals permuting after
    let mut r = rng(10);
    let (c, h, w) = (3, 4, 4);
    let x = rand_chw(&mut r, &[1, c, h, w]);
    let proj = Projection::linear(&mut r, c);

    let mut perm: Vec<usize> = (0..h * w).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let permute_pixels = |src: &Tensor| {
        let mut out = vec![0.0; src.numel()];
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] = src.data[ci * h * w + perm[p]];
            }
        }
        Tensor::new(src.shape.clone(), out).unwrap()
    };

    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let y = proj.apply(&mut t, xid).unwrap();
    let y_then_perm = permute_pixels(&t.export(y));

    let xp = t.constant(permute_pixels(&x));
    let perm_then_y = proj.apply(&mut t, xp).unwrap();
    assert_eq!(t.data(perm_then_y), &y_then_perm.data[..]);

    // the convolutional projection is position sensitive: same check fails
    let conv = Projection::conv(&mut r, c);
    let yc = conv.apply(&mut t, xid).unwrap();
    let yc_then_perm = permute_pixels(&t.export(yc));
    let perm_then_yc = conv.apply(&mut t, xp).unwrap();
    assert_ne!(t.data(perm_then_yc), &yc_then_perm.data[..]);
}

// ── attention ───────────────────────────────────────────────────────────

#[test]
fn attention_rows_are_stochastic_with_and_without_mask() {
    let mut r = rng(11);
    let (b, c, h, w, m, heads) = (1, 4, 8, 8, 4, 2);
    let x = rand_chw(&mut r, &[b, c, h, w]);
    for shifted in [false, true] {
        let attn = WindowAttention::new(&mut r, c, heads, m, true).unwrap();
        let spec = WindowSpec::new(m, if shifted { m / 2 } else { 0 }, h, w).unwrap();
        let mut t = Tape::new();
        let xid = t.constant(x.clone());
        let (_, probs) = attn.forward_detailed(&mut t, xid, xid, &spec).unwrap();
        let pd = t.data(probs);
        let rows = pd.len() / spec.tokens_per_window();
        for row in 0..rows {
            let chunk = &pd[row * 16..(row + 1) * 16];
            assert!(chunk.iter().all(|&v| v >= 0.0));
            let s: f64 = chunk.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "row sum {s} (shifted={shifted})");
        }
    }
}

#[test]
fn constant_v_makes_attention_output_constant() {
    let mut r = rng(12);
    let (c, h, w, m) = (4, 8, 8, 4);
    let mut attn = WindowAttention::new(&mut r, c, 2, m, true).unwrap();
    // force V ≡ 2.5 on every channel regardless of the input
    if let Projection::Conv { depthwise, pointwise } = &mut attn.v_proj {
        depthwise.weight.data_mut().fill(0.0);
        depthwise.bias.data_mut().fill(0.0);
        pointwise.weight.data_mut().fill(0.0);
        pointwise.bias.data_mut().fill(2.5);
    }
    let x = rand_chw(&mut r, &[1, c, h, w]);
    let spec = WindowSpec::regular(m, h, w).unwrap();
    let mut t = Tape::new();
    let xid = t.constant(x);
    let y = attn.forward(&mut t, xid, xid, &spec).unwrap();
    // attention weights are convex, so the mix of a constant V stays the
    // constant; the output is out_proj applied to (2.5, ..., 2.5) everywhere
    let wt = &attn.out_proj.weight.value;
    let bias = &attn.out_proj.bias.value;
    let expected: Vec<f64> = (0..c)
        .map(|o| bias.data[o] + (0..c).map(|i| 2.5 * wt.data[i * c + o]).sum::<f64>())
        .collect();
    let out = t.data(y);
    for p in 0..h * w {
        for ch in 0..c {
            let got = out[ch * h * w + p];
            assert!((got - expected[ch]).abs() < 1e-12, "pixel {p} channel {ch}");
        }
    }
}

#[test]
fn two_token_attention_closed_form() {
    // one window, one head, d = 1: a hand-evaluated softmax mixture
    let (q, k, v) = ([0.3, -0.7], [1.1, 0.4], [2.0, -1.0]);
    let mut t = Tape::new();
    let qid = t.constant(Tensor::new(vec![1, 2, 1], q.to_vec()).unwrap());
    let kid = t.constant(Tensor::new(vec![1, 2, 1], k.to_vec()).unwrap());
    let vid = t.constant(Tensor::new(vec![1, 2, 1], v.to_vec()).unwrap());
    let (out, probs) = attend_windows(&mut t, qid, kid, vid, 1, 1, 1, None, None).unwrap();

    for (i, &qi) in q.iter().enumerate() {
        let logits = [qi * k[0], qi * k[1]];
        let mx = logits[0].max(logits[1]);
        let e = [(logits[0] - mx).exp(), (logits[1] - mx).exp()];
        let z = e[0] + e[1];
        let expect = (e[0] * v[0] + e[1] * v[1]) / z;
        assert!((t.data(out)[i] - expect).abs() < 1e-12);
        assert!((t.data(probs)[i * 2] - e[0] / z).abs() < 1e-12);
    }
}

// ── transformer blocks ──────────────────────────────────────────────────

fn zero_residual_branches(block: &mut TransformerBlock) {
    block.attn.out_proj.weight.data_mut().fill(0.0);
    block.attn.out_proj.bias.data_mut().fill(0.0);
    block.mlp.fc2.weight.data_mut().fill(0.0);
    block.mlp.fc2.bias.data_mut().fill(0.0);
}

#[test]
fn encoder_pair_is_identity_under_zeroed_branches() {
    let mut r = rng(13);
    let mut pair = EncoderBlockPair::new(&mut r, 4, 2, 4, 4, true).unwrap();
    zero_residual_branches(&mut pair.first);
    zero_residual_branches(&mut pair.second);
    let x = rand_chw(&mut r, &[2, 4, 8, 8]);
    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let y = pair.forward(&mut t, xid).unwrap();
    assert_eq!(t.data(y), &x.data[..]);
}

#[test]
fn encoder_pair_preserves_shape() {
    let mut r = rng(14);
    let pair = EncoderBlockPair::new(&mut r, 8, 2, 4, 4, true).unwrap();
    let x = rand_chw(&mut r, &[2, 8, 8, 12]);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let y = pair.forward(&mut t, xid).unwrap();
    assert_eq!(t.shape(y), &[2, 8, 8, 12]);
}

#[test]
fn encoder_pair_gradcheck() {
    let mut r = rng(15);
    let pair = EncoderBlockPair::new(&mut r, 4, 2, 4, 4, true).unwrap();
    let x = rand_chw(&mut r, &[1, 4, 8, 8]);
    let res = check_fn("encoder_pair", &[x], 1e-5, 1e-4, |t, ids| {
        let y = pair.forward(t, ids[0])?;
        let y = t.mul(y, y)?;
        Ok(t.sum_all(y))
    })
    .unwrap();
    assert!(res.passed(), "encoder pair rel err {}", res.max_rel_err);
}

#[test]
fn cross_attention_with_equal_streams_is_self_attention_bitwise() {
    // degenerate cross = self, at the block level: querying from a skip
    // stream that carries the same values as x must match the self path
    let mut r = rng(77);
    let blk = TransformerBlock::new(&mut r, 4, 2, 4, 4, false, true).unwrap();
    let x = rand_chw(&mut r, &[1, 4, 8, 8]);
    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let skip = t.constant(x);
    let y_self = blk.forward(&mut t, xid, None).unwrap();
    let y_cross = blk.forward(&mut t, xid, Some(skip)).unwrap();
    assert_eq!(t.data(y_self), t.data(y_cross));
}

#[test]
fn decoder_pair_queries_skip_in_both_blocks() {
    // with the first block's residual branches zeroed, the stream reaching
    // the second block still equals the pair input, so a pair fed
    // skip == x_dec must then coincide bitwise with an identically
    // parameterized encoder pair
    let seed = 78;
    let mut r1 = rng(seed);
    let mut enc = EncoderBlockPair::new(&mut r1, 4, 2, 4, 4, true).unwrap();
    let mut r2 = rng(seed);
    let mut dec = DecoderBlockPair::new(&mut r2, 4, 2, 4, 4, true, DecoderMode::CrossAttention).unwrap();
    zero_residual_branches(&mut enc.first);
    zero_residual_branches(&mut dec.first);

    let mut r3 = rng(seed + 1);
    let x = rand_chw(&mut r3, &[1, 4, 8, 8]);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let ye = enc.forward(&mut t, xid).unwrap();
    let yd = dec.forward(&mut t, xid, xid).unwrap();
    let (de, dd) = (t.data(ye).to_vec(), t.data(yd).to_vec());
    assert_eq!(de, dd);
}

#[test]
fn decoder_concat_ablation_runs_and_differs() {
    let mut r = rng(16);
    let cross = DecoderBlockPair::new(&mut r, 4, 2, 4, 4, true, DecoderMode::CrossAttention).unwrap();
    let concat = DecoderBlockPair::new(&mut r, 4, 2, 4, 4, true, DecoderMode::ConcatFuse).unwrap();
    assert!(concat.fuse1.is_some() && concat.fuse2.is_some());
    let x = rand_chw(&mut r, &[1, 4, 8, 8]);
    let skip = rand_chw(&mut r, &[1, 4, 8, 8]);
    let mut t = Tape::new();
    let (xid, sid) = (t.constant(x), t.constant(skip));
    let yc = cross.forward(&mut t, xid, sid).unwrap();
    let yk = concat.forward(&mut t, xid, sid).unwrap();
    assert_eq!(t.shape(yc), t.shape(yk));
    assert_ne!(t.data(yc), t.data(yk));
}

#[test]
fn decoder_gradcheck_both_streams() {
    let mut r = rng(17);
    let dec = DecoderBlockPair::new(&mut r, 4, 2, 4, 4, true, DecoderMode::CrossAttention).unwrap();
    let x = rand_chw(&mut r, &[1, 4, 8, 8]);
    let skip = rand_chw(&mut r, &[1, 4, 8, 8]);
    let res = check_fn("decoder_pair", &[x, skip], 1e-5, 1e-4, |t, ids| {
        let y = dec.forward(t, ids[0], ids[1])?;
        let y = t.mul(y, y)?;
        Ok(t.sum_all(y))
    })
    .unwrap();
    assert!(res.passed(), "decoder pair rel err {}", res.max_rel_err);
}

#[test]
fn decoder_rejects_mismatched_streams() {
    let mut r = rng(18);
    let dec = DecoderBlockPair::new(&mut r, 4, 2, 4, 4, true, DecoderMode::CrossAttention).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 4, 8, 8]));
    let s = t.constant(Tensor::zeros(vec![1, 4, 4, 4]));
    assert!(dec.forward(&mut t, x, s).is_err());
}

// ── DDC / DUC ───────────────────────────────────────────────────────────

#[test]
fn ddc_shape() {
    let mut r = rng(19);
    let ddc = Ddc::new(&mut r, 1, 32, 4);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 1, 8, 8]));
    let y = ddc.forward(&mut t, x, true).unwrap();
    assert_eq!(t.shape(y), &[1, 32, 2, 2]);
}

#[test]
fn ddc_eval_identity_configuration() {
    // fresh running stats, unit scale, zero shift, identity conv:
    // DDC reduces to gelu ∘ unshuffle up to the eps in 1/sqrt(1 + eps)
    let mut r = rng(20);
    let mut ddc = Ddc::new(&mut r, 1, 4, 2);
    let wd = ddc.conv.weight.data_mut();
    wd.fill(0.0);
    for c in 0..4 {
        wd[c * 4 + c] = 1.0;
    }
    ddc.conv.bias.data_mut().fill(0.0);
    let x = rand_chw(&mut r, &[1, 1, 6, 6]);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let y = ddc.forward(&mut t, xid, false).unwrap();
    let u = t.pixel_unshuffle(xid, 2).unwrap();
    let expect = t.gelu(u);
    for (a, b) in t.data(y).iter().zip(t.data(expect).iter()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn duc_shape_and_spatial_inverse() {
    let mut r = rng(21);
    let duc = Duc::new(&mut r, 32, 16, 2);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 32, 2, 2]));
    let y = duc.forward(&mut t, x, true).unwrap();
    assert_eq!(t.shape(y), &[1, 16, 4, 4]);

    // duc(ddc(x)) restores spatial extent for matching r
    let ddc = Ddc::new(&mut r, 3, 32, 2);
    let x2 = t.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let down = ddc.forward(&mut t, x2, true).unwrap();
    let duc2 = Duc::new(&mut r, 32, 3, 2);
    let up = duc2.forward(&mut t, down, true).unwrap();
    assert_eq!(t.shape(up), t.shape(x2));
}

#[test]
fn duc_gradcheck() {
    let mut r = rng(22);
    let duc = Duc::new(&mut r, 3, 2, 2);
    let x = rand_chw(&mut r, &[2, 3, 3, 3]);
    let res = check_fn("duc", &[x], 1e-5, 1e-5, |t, ids| {
        let y = duc.forward(t, ids[0], true)?;
        let y = t.mul(y, y)?;
        Ok(t.sum_all(y))
    })
    .unwrap();
    assert!(res.passed(), "duc rel err {}", res.max_rel_err);
}

#[test]
fn batch_norm_running_stats_update_and_freeze() {
    let mut r = rng(23);
    let bn = BatchNorm2d::new(2);
    let x = rand_chw(&mut r, &[4, 2, 3, 3]);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let before = bn.running.borrow().clone();
    let _ = bn.forward(&mut t, xid, true).unwrap();
    let after_train = bn.running.borrow().clone();
    assert_ne!(before, after_train, "training must update running stats");
    let _ = bn.forward(&mut t, xid, false).unwrap();
    let after_eval = bn.running.borrow().clone();
    assert_eq!(after_train, after_eval, "eval must freeze running stats");
}
