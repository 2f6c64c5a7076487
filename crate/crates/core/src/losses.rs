//! Training objectives and their gradients with respect to probabilities.
//!
//! Per-class probability grids are passed channel-major: element `c * n + i`
//! is the probability of class `c` at voxel `i`. Class `1` is the lesion.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

pub const FOCAL_CLAMP: f64 = 1e-7;
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_ent: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub focal_gamma: f64,
    /// Relative weight per supervised scale, finest first. Normalised on use;
    /// empty means halving weights for however many scales the model has.
    pub deep_supervision: Vec<f64>,
    /// Apply the entropy term to every rescaled scale instead of `P1` only.
    pub entropy_all_scales: bool,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_ent: 0.2,
            dice_weight: 0.5,
            focal_weight: 0.5,
            focal_gamma: 2.0,
            deep_supervision: Vec::new(),
            entropy_all_scales: false,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.lambda_cls,
            self.lambda_ent,
            self.dice_weight,
            self.focal_weight,
            self.focal_gamma,
            self.dice_smooth,
        ];
        if scalars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        let ds = &self.deep_supervision;
        if !ds.is_empty() && (ds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || ds.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::InvalidConfig(
                "deep supervision weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(())
    }

    /// Deep-supervision weights for `num_scales` outputs, summing to one.
    pub fn scale_weights(&self, num_scales: usize) -> Result<Vec<f64>> {
        if self.deep_supervision.is_empty() {
            let h = Self::halving(num_scales);
            let total: f64 = h.iter().sum();
            return Ok(h.iter().map(|w| w / total).collect());
        }
        if self.deep_supervision.len() != num_scales {
            return Err(Error::InvalidConfig(format!(
                "{} deep supervision weights for {num_scales} scales",
                self.deep_supervision.len()
            )));
        }
        let total: f64 = self.deep_supervision.iter().sum();
        Ok(self.deep_supervision.iter().map(|w| w / total).collect())
    }

    /// Halving weights `1, 1/2, 1/4, ...` for `num_scales` outputs.
    pub fn halving(num_scales: usize) -> Vec<f64> {
        (0..num_scales).map(|s| 0.5f64.powi(s as i32)).collect()
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(shape_mismatch(&[expected], &[actual]));
    }
    Ok(())
}

fn is_valid(valid: Option<&[bool]>, i: usize) -> bool {
    valid.is_none_or(|v| v[i])
}

fn check_probs(probs: &[f64], num_classes: usize) -> Result<usize> {
    if num_classes < 2 || probs.len() % num_classes != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities do not split into {num_classes} classes",
            probs.len()
        )));
    }
    Ok(probs.len() / num_classes)
}

/// Soft Dice loss `1 - (2 sum(P y) + s) / (sum(P) + sum(y) + s)` over valid voxels.
pub fn dice_loss(p: &[f64], y: &[u8], valid: Option<&[bool]>, smooth: f64) -> Result<f64> {
    dice_terms(p, y, valid, smooth).map(|(loss, _, _)| loss)
}

fn dice_terms(p: &[f64], y: &[u8], valid: Option<&[bool]>, smooth: f64) -> Result<(f64, f64, f64)> {
    check_len(p.len(), y.len())?;
    if let Some(v) = valid {
        check_len(p.len(), v.len())?;
    }
    let (mut inter, mut denom) = (0.0, 0.0);
    for i in 0..p.len() {
        if is_valid(valid, i) {
            let t = f64::from(y[i]);
            inter += p[i] * t;
            denom += p[i] + t;
        }
    }
    let num = 2.0 * inter + smooth;
    let den = denom + smooth;
    Ok((1.0 - num / den, num, den))
}

pub fn dice_loss_grad(
    p: &[f64],
    y: &[u8],
    valid: Option<&[bool]>,
    smooth: f64,
) -> Result<(f64, Vec<f64>)> {
    let (loss, num, den) = dice_terms(p, y, valid, smooth)?;
    let grad = (0..p.len())
        .map(|i| {
            if is_valid(valid, i) {
                -(2.0 * f64::from(y[i]) * den - num) / (den * den)
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Mean focal loss `-(1 - p_t)^gamma ln p_t` over valid voxels, where `p_t`
/// is the probability of the true class.
pub fn focal_loss(
    probs: &[f64],
    num_classes: usize,
    y: &[u8],
    gamma: f64,
    valid: Option<&[bool]>,
) -> Result<f64> {
    focal_impl(probs, num_classes, y, gamma, valid, false).map(|(l, _)| l)
}

pub fn focal_loss_grad(
    probs: &[f64],
    num_classes: usize,
    y: &[u8],
    gamma: f64,
    valid: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    focal_impl(probs, num_classes, y, gamma, valid, true)
}

fn focal_impl(
    probs: &[f64],
    num_classes: usize,
    y: &[u8],
    gamma: f64,
    valid: Option<&[bool]>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = check_probs(probs, num_classes)?;
    check_len(n, y.len())?;
    if let Some(v) = valid {
        check_len(n, v.len())?;
    }
    let count = (0..n).filter(|&i| is_valid(valid, i)).count();
    let mut grad = if want_grad { vec![0.0; probs.len()] } else { Vec::new() };
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for i in 0..n {
        if !is_valid(valid, i) {
            continue;
        }
        let c = usize::from(y[i]);
        let raw = probs[c * n + i];
        let pt = raw.max(FOCAL_CLAMP);
        let q = 1.0 - pt;
        let ln = pt.ln();
        total += -q.powf(gamma) * ln;
        if want_grad && raw > FOCAL_CLAMP {
            let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln };
            grad[c * n + i] = (dq - q.powf(gamma) / pt) * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Mean voxel-wise Shannon entropy `-sum_c p_c ln p_c` (with `0 ln 0 = 0`).
pub fn entropy_loss(probs: &[f64], num_classes: usize, valid: Option<&[bool]>) -> Result<f64> {
    entropy_impl(probs, num_classes, valid, false).map(|(l, _)| l)
}

pub fn entropy_loss_grad(
    probs: &[f64],
    num_classes: usize,
    valid: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    entropy_impl(probs, num_classes, valid, true)
}

fn entropy_impl(
    probs: &[f64],
    num_classes: usize,
    valid: Option<&[bool]>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = check_probs(probs, num_classes)?;
    if let Some(v) = valid {
        check_len(n, v.len())?;
    }
    let count = (0..n).filter(|&i| is_valid(valid, i)).count();
    let mut grad = if want_grad { vec![0.0; probs.len()] } else { Vec::new() };
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for i in 0..n {
        if !is_valid(valid, i) {
            continue;
        }
        for c in 0..num_classes {
            let p = probs[c * n + i];
            if p > 0.0 {
                total -= p * p.ln();
            }
            if want_grad {
                grad[c * n + i] = -(p.max(ENTROPY_CLAMP).ln() + 1.0) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Voxel-wise entropy map of a channel-major probability grid.
pub fn entropy_map(probs: &[f64], num_classes: usize) -> Result<Vec<f64>> {
    let n = check_probs(probs, num_classes)?;
    Ok((0..n)
        .map(|i| {
            (0..num_classes)
                .map(|c| probs[c * n + i])
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum()
        })
        .collect())
}

/// Binary entropy of a lesion probability, in nats.
pub fn binary_entropy(p: f64) -> f64 {
    [p, 1.0 - p]
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Cross-entropy of the patch class prediction, `-ln p_true` (clamped).
pub fn classification_loss(class_probs: &[f64], class: usize) -> Result<f64> {
    classification_loss_grad(class_probs, class).map(|(l, _)| l)
}

pub fn classification_loss_grad(class_probs: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= class_probs.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} probabilities",
            class_probs.len()
        )));
    }
    let raw = class_probs[class];
    let p = raw.max(FOCAL_CLAMP);
    let mut grad = vec![0.0; class_probs.len()];
    if raw > FOCAL_CLAMP {
        grad[class] = -1.0 / p;
    }
    Ok((-p.ln(), grad))
}

/// Deep-supervised segmentation loss over rescaled per-scale predictions.
pub fn seg_loss(
    scales: &[Vec<f64>],
    num_classes: usize,
    y: &[u8],
    valid: Option<&[bool]>,
    weights: &LossWeights,
) -> Result<f64> {
    seg_loss_grad(scales, num_classes, y, valid, weights).map(|(l, _)| l)
}

pub fn seg_loss_grad(
    scales: &[Vec<f64>],
    num_classes: usize,
    y: &[u8],
    valid: Option<&[bool]>,
    weights: &LossWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let ws = weights.scale_weights(scales.len())?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scales.len());
    for (probs, &w) in scales.iter().zip(&ws) {
        let n = check_probs(probs, num_classes)?;
        let lesion = &probs[n..2 * n];
        let (dl, dg) = dice_loss_grad(lesion, y, valid, weights.dice_smooth)?;
        let (fl, fg) = focal_loss_grad(probs, num_classes, y, weights.focal_gamma, valid)?;
        total += w * (weights.dice_weight * dl + weights.focal_weight * fl);
        let mut g: Vec<f64> = fg.iter().map(|v| w * weights.focal_weight * v).collect();
        for (gi, d) in g[n..2 * n].iter_mut().zip(dg) {
            *gi += w * weights.dice_weight * d;
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// `L_seg + lambda_cls L_cls + lambda_ent L_ent`.
pub fn total_loss(seg: f64, cls: f64, ent: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("seg", seg), ("cls", cls), ("ent", ent)] {
        if v.is_nan() || v.is_infinite() {
            return Err(Error::Divergence(format!("{name} loss is {v}")));
        }
        if v < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} loss is negative ({v})")));
        }
    }
    Ok(seg + weights.lambda_cls * cls + weights.lambda_ent * ent)
}
