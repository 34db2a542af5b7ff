//! Segmentation losses and their gradients.
//!
//! Values and gradients are computed in `f64` over the whole batch
//! flattened, so gradient checks can be tight.

use serde::{Deserialize, Serialize};

use super::{Result, UnetError};

/// Smoothing constant added to numerator and denominator of soft Dice.
pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

/// Probabilities are clipped into `[CLIP, 1 - CLIP]` before taking logs.
const CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Dice,
    LogDice,
    BcePlusDice,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            "log_dice" | "logdice" => Ok(LossKind::LogDice),
            "bce_plus_dice" | "bce_dice" | "bceplusdice" => Ok(LossKind::BcePlusDice),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

fn check(t: &[f64], p: &[f64]) -> Result<()> {
    if t.len() != p.len() {
        return Err(UnetError::ShapeMismatch(format!(
            "y_true has {} values, y_pred has {}",
            t.len(),
            p.len()
        )));
    }
    if t.is_empty() {
        return Err(UnetError::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

/// Soft Dice coefficient `(2 sum(t p) + eps) / (sum t + sum p + eps)`.
pub(crate) fn soft_dice(t: &[f64], p: &[f64], eps: f64) -> f64 {
    let (i, s) = sums(t, p);
    (2.0 * i + eps) / (s + eps)
}

fn sums(t: &[f64], p: &[f64]) -> (f64, f64) {
    t.iter()
        .zip(p)
        .fold((0.0, 0.0), |(i, s), (&t, &p)| (i + t * p, s + t + p))
}

fn bce(t: &[f64], p: &[f64]) -> f64 {
    let n = t.len() as f64;
    -t.iter()
        .zip(p)
        .map(|(&t, &p)| {
            let p = p.clamp(CLIP, 1.0 - CLIP);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

/// Loss value for probability predictions `y_pred` against targets `y_true`.
pub fn loss(kind: LossKind, y_true: &[f64], y_pred: &[f64], smooth: f64) -> Result<f64> {
    check(y_true, y_pred)?;
    let dice = || soft_dice(y_true, y_pred, smooth);
    Ok(match kind {
        LossKind::Bce => bce(y_true, y_pred),
        LossKind::Dice => 1.0 - dice(),
        LossKind::LogDice => -dice().ln(),
        LossKind::BcePlusDice => bce(y_true, y_pred) + 1.0 - dice(),
    })
}

/// `d soft_dice / d p_i` for every element.
fn dice_grad(t: &[f64], p: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let (i, s) = sums(t, p);
    let den = s + eps;
    let num = 2.0 * i + eps;
    let g = t
        .iter()
        .map(|&t| (2.0 * t * den - num) / (den * den))
        .collect();
    (num / den, g)
}

/// Loss value and its gradient with respect to each `y_pred` element.
pub fn loss_grad(
    kind: LossKind,
    y_true: &[f64],
    y_pred: &[f64],
    smooth: f64,
) -> Result<(f64, Vec<f64>)> {
    check(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let bce_grad = || -> Vec<f64> {
        y_true
            .iter()
            .zip(y_pred)
            .map(|(&t, &p)| {
                if p <= CLIP || p >= 1.0 - CLIP {
                    0.0
                } else {
                    (-t / p + (1.0 - t) / (1.0 - p)) / n
                }
            })
            .collect()
    };
    Ok(match kind {
        LossKind::Bce => (bce(y_true, y_pred), bce_grad()),
        LossKind::Dice => {
            let (d, g) = dice_grad(y_true, y_pred, smooth);
            (1.0 - d, g.into_iter().map(|v| -v).collect())
        }
        LossKind::LogDice => {
            let (d, g) = dice_grad(y_true, y_pred, smooth);
            (-d.ln(), g.into_iter().map(|v| -v / d).collect())
        }
        LossKind::BcePlusDice => {
            let (d, g) = dice_grad(y_true, y_pred, smooth);
            let b = bce_grad();
            (
                bce(y_true, y_pred) + 1.0 - d,
                b.into_iter().zip(g).map(|(b, g)| b - g).collect(),
            )
        }
    })
}

/// Loss and gradient with respect to pre-sigmoid logits, as used in training.
///
/// The cross-entropy part is computed from logits directly, which is exact
/// and avoids the clipping dead zone.
pub(crate) fn logit_loss_grad(
    kind: LossKind,
    t: &[f32],
    z: &[f32],
    smooth: f64,
) -> (f64, Vec<f32>) {
    let n = t.len() as f64;
    let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = z
        .iter()
        .map(|&z| 1.0 / (1.0 + (-(z as f64)).exp()))
        .collect();
    let bce_from_logits = || -> f64 {
        t64.iter()
            .zip(z)
            .map(|(&t, &z)| {
                let z = z as f64;
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n
    };
    let mut value = 0.0;
    let mut grad = vec![0.0f64; t.len()];
    if matches!(kind, LossKind::Bce | LossKind::BcePlusDice) {
        value += bce_from_logits();
        for ((g, &p), &t) in grad.iter_mut().zip(&p).zip(&t64) {
            *g += (p - t) / n;
        }
    }
    if matches!(
        kind,
        LossKind::Dice | LossKind::LogDice | LossKind::BcePlusDice
    ) {
        let (d, dg) = dice_grad(&t64, &p, smooth);
        let scale = if kind == LossKind::LogDice {
            value += -d.ln();
            -1.0 / d
        } else {
            value += 1.0 - d;
            -1.0
        };
        for ((g, dg), &p) in grad.iter_mut().zip(dg).zip(&p) {
            *g += scale * dg * p * (1.0 - p);
        }
    }
    (value, grad.into_iter().map(|g| g as f32).collect())
}
