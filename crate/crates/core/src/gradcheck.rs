//! Central finite-difference verification of every differentiable operation,
//! the transformer blocks, both loss families and the assembled model.
//!
//! The same harness backs the `gradcheck` CLI command and the test suites:
//! analytic gradients come from one tape + backward pass, the reference from
//! re-running the forward with each input element perturbed by ±h. The
//! forward recomputation never touches the backward code path it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorId};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1.0)
}

/// Check analytic gradients of `build` against central differences.
///
/// `build` receives leaf ids for each input (in order) and must return a
/// scalar loss id. Inputs are perturbed one element at a time with step `h`.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor],
    h: f64,
    tolerance: f64,
    build: impl Fn(&mut Tape, &[TensorId]) -> crate::Result<TensorId>,
) -> crate::Result<CheckResult> {
    let run = |values: &[Tensor]| -> crate::Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (mut tape, ids, loss) = run(inputs)?;
    tape.backward(loss).map_err(crate::Error::Tensor)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_err = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let eval = |delta: f64| -> crate::Result<f64> {
                let mut perturbed: Vec<Tensor> = inputs.to_vec();
                let mut data = perturbed[pi].data.as_ref().clone();
                data[ei] += delta;
                perturbed[pi] = Tensor::new(perturbed[pi].shape.clone(), data).map_err(crate::Error::Tensor)?;
                let (t, _, l) = run(&perturbed)?;
                Ok(t.value(l))
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[pi][ei], fd));
        }
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: max_err, tolerance })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Random tensor bounded away from zero, for ops with a kink there.
fn rand_tensor_away_from(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..1.5)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Per-operation finite-difference suite at tiny shapes, `seeds` trials each.
/// Every differentiable op registered on the tape appears here.
pub fn op_suite(seed: u64, seeds: usize) -> crate::Result<Vec<CheckResult>> {
    let h = 1e-5;
    let tol = 1e-5;
    let mut results = Vec::new();

    // (name, input sampler, graph builder)
    type Sampler = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
    type Builder = fn(&mut Tape, &[TensorId]) -> crate::Result<TensorId>;
    let checks: Vec<(&str, Sampler, Builder)> = vec![
        (
            "add",
            |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[3, 1], -1.0, 1.0)],
            |t, ids| {
                let y = t.add(ids[0], ids[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "sub",
            |r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)],
            |t, ids| {
                let y = t.sub(ids[0], ids[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "mul",
            |r| vec![rand_tensor(r, &[2, 3, 2], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
            |t, ids| {
                let y = t.mul(ids[0], ids[1])?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "div",
            |r| vec![rand_tensor(r, &[2, 4], -1.0, 1.0), rand_tensor_away_from(r, &[4], 0.3)],
            |t, ids| {
                let y = t.div(ids[0], ids[1])?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "neg",
            |r| vec![rand_tensor(r, &[5], -1.0, 1.0)],
            |t, ids| {
                let y = t.neg(ids[0]);
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "exp",
            |r| vec![rand_tensor(r, &[6], -1.0, 1.0)],
            |t, ids| {
                let y = t.exp(ids[0]);
                Ok(t.sum_all(y))
            },
        ),
        (
            "log",
            |r| vec![rand_tensor(r, &[6], 0.2, 2.0)],
            |t, ids| {
                let y = t.log(ids[0]);
                Ok(t.sum_all(y))
            },
        ),
        (
            "relu",
            |r| vec![rand_tensor_away_from(r, &[8], 0.1)],
            |t, ids| {
                let y = t.relu(ids[0]);
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "gelu",
            |r| vec![rand_tensor(r, &[8], -2.0, 2.0)],
            |t, ids| {
                let y = t.gelu(ids[0]);
                Ok(t.sum_all(y))
            },
        ),
        (
            "scale_add_scalar",
            |r| vec![rand_tensor(r, &[5], -1.0, 1.0)],
            |t, ids| {
                let y = t.scale(ids[0], 0.37);
                let y = t.add_scalar(y, 1.25);
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "matmul",
            |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
            |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "matmul_batched",
            |r| vec![rand_tensor(r, &[2, 2, 3, 2], -1.0, 1.0), rand_tensor(r, &[2, 2, 2, 3], -1.0, 1.0)],
            |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "matmul_broadcast_rhs",
            |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
            |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "softmax",
            |r| vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0), rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            |t, ids| {
                // weight by an independent leaf so the row-sum-1 constraint
                // does not hide gradient errors
                let y = t.softmax(ids[0], 1)?;
                let y = t.mul(y, ids[1])?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "layer_norm",
            |r| {
                vec![
                    rand_tensor(r, &[2, 4, 8], -1.0, 1.0),
                    rand_tensor(r, &[8], 0.5, 1.5),
                    rand_tensor(r, &[8], -0.5, 0.5),
                ]
            },
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "batch_norm",
            |r| {
                vec![
                    rand_tensor(r, &[2, 3, 2, 2], -1.0, 1.0),
                    rand_tensor(r, &[3], 0.5, 1.5),
                    rand_tensor(r, &[3], -0.5, 0.5),
                ]
            },
            |t, ids| {
                let y = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "conv2d",
            |r| {
                vec![
                    rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0),
                    rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0),
                    rand_tensor(r, &[3], -0.5, 0.5),
                ]
            },
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 1)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "conv2d_strided_grouped",
            |r| {
                vec![
                    rand_tensor(r, &[2, 4, 6, 6], -1.0, 1.0),
                    rand_tensor(r, &[4, 2, 3, 3], -1.0, 1.0),
                    rand_tensor(r, &[4], -0.5, 0.5),
                ]
            },
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1, 2)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "pixel_shuffle",
            |r| vec![rand_tensor(r, &[1, 8, 2, 2], -1.0, 1.0)],
            |t, ids| {
                let y = t.pixel_shuffle(ids[0], 2)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "pixel_unshuffle",
            |r| vec![rand_tensor(r, &[1, 2, 4, 4], -1.0, 1.0)],
            |t, ids| {
                let y = t.pixel_unshuffle(ids[0], 2)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "reshape_permute",
            |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            |t, ids| {
                let y = t.permute(ids[0], &[2, 0, 1])?;
                let y = t.reshape(y, vec![4, 6])?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "roll2d",
            |r| vec![rand_tensor(r, &[1, 2, 4, 4], -1.0, 1.0)],
            |t, ids| {
                let y = t.roll2d(ids[0], -1, -2)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "concat",
            |r| vec![rand_tensor(r, &[2, 2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3, 3], -1.0, 1.0)],
            |t, ids| {
                let y = t.concat(&[ids[0], ids[1]], 1)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "index_select",
            |r| vec![rand_tensor(r, &[5, 3], -1.0, 1.0)],
            |t, ids| {
                let idx = std::sync::Arc::new(vec![4usize, 0, 2, 0, 0]);
                let y = t.index_select(ids[0], idx)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "sum_axes",
            |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            |t, ids| {
                let y = t.sum_axes(ids[0], &[0, 2], false)?;
                let y = t.mul(y, y)?;
                Ok(t.sum_all(y))
            },
        ),
        (
            "sum_all_mean",
            |r| vec![rand_tensor(r, &[3, 3], -1.0, 1.0)],
            |t, ids| {
                let y = t.mul(ids[0], ids[0])?;
                Ok(t.mean_all(y))
            },
        ),
    ];

    for (name, sampler, builder) in checks {
        let mut worst = CheckResult { name: name.to_string(), max_rel_err: 0.0, tolerance: tol };
        for trial in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let inputs = sampler(&mut rng);
            let res = check_fn(name, &inputs, h, tol, builder)?;
            worst.max_rel_err = worst.max_rel_err.max(res.max_rel_err);
        }
        results.push(worst);
    }
    Ok(results)
}
