//! Uncertainty-wise weighting: the per-pixel disagreement map between the
//! two heads, the weighted cross-entropy and Dice losses, the uncertainty
//! regularizer and the total objective with its gradient-stop rule.

use crate::model::PredictionPair;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// How the averaged prediction P' is formed. `Normalized` (default) uses
/// P' = (P_s + P_a)/2, a proper distribution guaranteeing M >= 0;
/// `Literal` uses P' = P_s + 0.5 P_a exactly as printed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyVariant {
    #[default]
    Normalized,
    Literal,
}

impl std::str::FromStr for UncertaintyVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normalized" => Ok(UncertaintyVariant::Normalized),
            "literal" => Ok(UncertaintyVariant::Literal),
            other => Err(format!("unknown uncertainty variant `{other}` (expected normalized|literal)")),
        }
    }
}

/// Per-pixel uncertainty scores `[B,H,W]`. `detached` records whether the
/// tensor is cut from the tape; the weighted losses insist on it so
/// segmentation gradients never flow into the map.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyMap {
    pub map: TensorId,
    pub detached: bool,
}

impl UncertaintyMap {
    pub fn detached(&self, t: &mut Tape) -> UncertaintyMap {
        UncertaintyMap { map: t.detach(self.map), detached: true }
    }

    /// Wrap a constant map (already carrying no gradient).
    pub fn constant(t: &mut Tape, values: Tensor) -> UncertaintyMap {
        UncertaintyMap { map: t.constant(values), detached: true }
    }
}

/// Check that a `[B,C,H,W]` tensor is a per-pixel distribution over classes.
pub fn validate_distribution(t: &Tape, p: TensorId) -> Result<()> {
    let s = t.shape(p);
    if s.len() != 4 {
        return Err(Error::Distribution(format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let data = t.data(p);
    for bi in 0..b {
        for px in 0..plane {
            let mut sum = 0.0;
            for ci in 0..c {
                sum += data[(bi * c + ci) * plane + px];
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Distribution(format!(
                    "class sum {sum} at batch {bi}, pixel {px} deviates from 1 by more than 1e-6"
                )));
            }
        }
    }
    Ok(())
}

/// Disagreement-entropy map M = −Σ_c (P_s + P_a)·log P' as a live tape
/// tensor `[B,H,W]`; gradient flows to both predictions until detached.
pub fn uncertainty_map(
    t: &mut Tape,
    p_s: TensorId,
    p_a: TensorId,
    variant: UncertaintyVariant,
) -> Result<UncertaintyMap> {
    if t.shape(p_s) != t.shape(p_a) {
        return Err(Error::Distribution(format!(
            "prediction shapes differ: {:?} vs {:?}",
            t.shape(p_s),
            t.shape(p_a)
        )));
    }
    validate_distribution(t, p_s)?;
    validate_distribution(t, p_a)?;
    let p_prime = match variant {
        UncertaintyVariant::Normalized => {
            let s = t.add(p_s, p_a)?;
            t.scale(s, 0.5)
        }
        UncertaintyVariant::Literal => {
            let half_a = t.scale(p_a, 0.5);
            t.add(p_s, half_a)?
        }
    };
    let log_p = t.log(p_prime);
    let weight = t.add(p_s, p_a)?;
    let prod = t.mul(weight, log_p)?;
    let summed = t.sum_axes(prod, &[1], false)?;
    Ok(UncertaintyMap { map: t.neg(summed), detached: false })
}

fn check_weighting_inputs(t: &Tape, p: TensorId, y: TensorId, m: &UncertaintyMap) -> Result<(usize, usize, usize, usize)> {
    if !m.detached {
        return Err(Error::UndetachedMap);
    }
    let s = t.shape(p).to_vec();
    if t.shape(y) != s.as_slice() {
        return Err(Error::Distribution(format!(
            "prediction {:?} and target {:?} shapes differ",
            s,
            t.shape(y)
        )));
    }
    let expect_m = [s[0], s[2], s[3]];
    if t.shape(m.map) != expect_m {
        return Err(Error::Distribution(format!(
            "uncertainty map {:?} does not match predictions {:?}",
            t.shape(m.map),
            s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Uncertainty-weighted cross entropy: −Σ M·Y·log P, mean-reduced over
/// batch and pixels. No gradient flows into M.
pub fn weighted_ce(t: &mut Tape, p: TensorId, y: TensorId, m: &UncertaintyMap) -> Result<TensorId> {
    let (b, _, h, w) = check_weighting_inputs(t, p, y, m)?;
    let log_p = t.log(p);
    let picked = t.mul(y, log_p)?;
    let m4 = t.reshape(m.map, vec![b, 1, h, w])?;
    let weighted = t.mul(picked, m4)?;
    let s = t.sum_all(weighted);
    Ok(t.scale(s, -1.0 / (b * h * w) as f64))
}

/// Uncertainty-weighted Dice loss with smoothing `eps`:
/// 1 − (1/C)·Σ_c (2·ΣM·(P⊙Y) + ε) / (ΣM·(P+Y) + ε).
pub fn weighted_dice(t: &mut Tape, p: TensorId, y: TensorId, m: &UncertaintyMap, eps: f64) -> Result<TensorId> {
    let (b, c, h, w) = check_weighting_inputs(t, p, y, m)?;
    let m4 = t.reshape(m.map, vec![b, 1, h, w])?;
    let inter = t.mul(p, y)?;
    let union = t.add(p, y)?;
    let wi = t.mul(inter, m4)?;
    let wu = t.mul(union, m4)?;
    let mi = t.sum_axes(wi, &[0, 2, 3], false)?;
    let mu = t.sum_axes(wu, &[0, 2, 3], false)?;
    let mi2 = t.scale(mi, 2.0);
    let num = t.add_scalar(mi2, eps);
    let den = t.add_scalar(mu, eps);
    let ratio = t.div(num, den)?;
    let total = t.sum_all(ratio);
    let mean = t.scale(total, 1.0 / c as f64);
    let neg = t.neg(mean);
    Ok(t.add_scalar(neg, 1.0))
}

/// Uncertainty regularizer R = Σ M / (B·H·W·C). Gradient flows to both
/// prediction heads through the live map.
pub fn regularizer_kl(
    t: &mut Tape,
    p_s: TensorId,
    p_a: TensorId,
    variant: UncertaintyVariant,
) -> Result<TensorId> {
    let m = uncertainty_map(t, p_s, p_a, variant)?;
    regularizer_from_map(t, m.map, t.shape(p_s)[1])
}

fn regularizer_from_map(t: &mut Tape, map: TensorId, classes: usize) -> Result<TensorId> {
    let n: usize = t.shape(map).iter().product();
    let s = t.sum_all(map);
    Ok(t.scale(s, 1.0 / (n * classes) as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LossFlags {
    /// Disable the uncertainty scheme: weights become 1 and the
    /// regularizer is dropped (alpha forced to 0).
    pub without_u: bool,
}

/// Scalar values of every objective component for one step, plus the tape
/// id of the total for backward.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub ce_s: f64,
    pub dice_s: f64,
    pub ce_a: f64,
    pub dice_a: f64,
    pub r_kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub mean_uncertainty: f64,
    pub total_id: TensorId,
}

/// The training objective
/// L = L_ce(P_s) + L_dice(P_s) + L_ce(P_a) + L_dice(P_a) + α·R.
///
/// The map is computed once per step, detached inside the four weighted
/// terms and live inside the regularizer.
pub fn total_objective(
    t: &mut Tape,
    pair: &PredictionPair,
    y: TensorId,
    alpha: f64,
    eps: f64,
    variant: UncertaintyVariant,
    flags: LossFlags,
) -> Result<LossReport> {
    total_objective_with_map(t, pair, y, alpha, eps, variant, flags, None)
}

/// As [`total_objective`], but the weighting map may be pinned to a fixed
/// constant. The finite-difference harness uses this: the analytic gradient
/// treats M as a constant inside the weighted terms, so the re-evaluated
/// objective must hold M at its baseline value while the regularizer stays
/// live.
#[allow(clippy::too_many_arguments)]
pub fn total_objective_with_map(
    t: &mut Tape,
    pair: &PredictionPair,
    y: TensorId,
    alpha: f64,
    eps: f64,
    variant: UncertaintyVariant,
    flags: LossFlags,
    fixed_map: Option<&Tensor>,
) -> Result<LossReport> {
    if alpha < 0.0 {
        return Err(Error::InvalidConfig("alpha must be >= 0".into()));
    }
    let (p_s, p_a) = (pair.p_s, pair.p_a);
    let shape = t.shape(p_s).to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);

    if flags.without_u {
        let ones = UncertaintyMap::constant(t, Tensor::ones(vec![b, h, w]));
        let ce_s = weighted_ce(t, p_s, y, &ones)?;
        let dice_s = weighted_dice(t, p_s, y, &ones, eps)?;
        let ce_a = weighted_ce(t, p_a, y, &ones)?;
        let dice_a = weighted_dice(t, p_a, y, &ones, eps)?;
        let seg = t.add(ce_s, dice_s)?;
        let aux = t.add(ce_a, dice_a)?;
        let total = t.add(seg, aux)?;
        return Ok(LossReport {
            ce_s: t.value(ce_s),
            dice_s: t.value(dice_s),
            ce_a: t.value(ce_a),
            dice_a: t.value(dice_a),
            r_kl: 0.0,
            total: t.value(total),
            alpha: 0.0,
            mean_uncertainty: 0.0,
            total_id: total,
        });
    }

    let live = uncertainty_map(t, p_s, p_a, variant)?;
    let weight_map = match fixed_map {
        None => live.detached(t),
        Some(m) => UncertaintyMap::constant(t, m.clone()),
    };
    let classes = shape[1];
    let r_kl = regularizer_from_map(t, live.map, classes)?;

    let ce_s = weighted_ce(t, p_s, y, &weight_map)?;
    let dice_s = weighted_dice(t, p_s, y, &weight_map, eps)?;
    let ce_a = weighted_ce(t, p_a, y, &weight_map)?;
    let dice_a = weighted_dice(t, p_a, y, &weight_map, eps)?;
    let seg = t.add(ce_s, dice_s)?;
    let aux = t.add(ce_a, dice_a)?;
    let heads = t.add(seg, aux)?;
    let reg = t.scale(r_kl, alpha);
    let total = t.add(heads, reg)?;

    let mean_uncertainty = t.value(r_kl);
    Ok(LossReport {
        ce_s: t.value(ce_s),
        dice_s: t.value(dice_s),
        ce_a: t.value(ce_a),
        dice_a: t.value(dice_a),
        r_kl: t.value(r_kl),
        total: t.value(total),
        alpha,
        mean_uncertainty,
        total_id: total,
    })
}

/// The baseline uncertainty map values for the current predictions,
/// exported off-tape (used to pin M during finite-difference checks and
/// for heat-map rendering).
pub fn uncertainty_values(
    t: &mut Tape,
    p_s: TensorId,
    p_a: TensorId,
    variant: UncertaintyVariant,
) -> Result<Tensor> {
    let m = uncertainty_map(t, p_s, p_a, variant)?;
    Ok(t.export(m.map))
}
