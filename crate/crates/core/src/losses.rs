//! Segmentation (focal + dice), image classification (BCE) and the weighted
//! total objective, each with its analytic gradient.

use crate::error::{domain_err, shape_err, Result};
use crate::heads::AnomalyMap;

/// Probability clipping bound shared by focal and BCE.
pub const PROB_CLIP: f64 = 1e-7;
/// Additive smoothing in the dice ratio.
pub const DICE_SMOOTH: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_etf: f64,
    pub lambda_bal: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_etf: 0.01,
            lambda_bal: 0.01,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_etf < 0.0 || self.lambda_bal < 0.0 || self.gamma < 0.0 {
            return domain_err("loss weights must be nonnegative");
        }
        Ok(())
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

fn clip_slope(p: f64) -> f64 {
    if (PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// `−mean (1−p)^γ · ln p` over true-class probabilities.
pub fn focal_loss(p_true: &[f64], gamma: f64) -> Result<f64> {
    if p_true.is_empty() {
        return domain_err("focal loss over an empty map");
    }
    let sum: f64 = p_true
        .iter()
        .map(|&p| {
            let p = clip(p);
            -(1.0 - p).powf(gamma) * p.ln()
        })
        .sum();
    Ok(sum / p_true.len() as f64)
}

/// Derivative of [`focal_loss`] with respect to each `p_true`.
pub fn focal_loss_grad(p_true: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if p_true.is_empty() {
        return domain_err("focal loss over an empty map");
    }
    let inv_n = 1.0 / p_true.len() as f64;
    Ok(p_true
        .iter()
        .map(|&raw| {
            let p = clip(raw);
            let q = 1.0 - p;
            let d_pow = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
            inv_n * clip_slope(raw) * (d_pow * p.ln() - q.powf(gamma) / p)
        })
        .collect())
}

/// Picks the true-class probability per pixel from a two-channel map.
pub fn true_class_probs(map: &AnomalyMap, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != map.anomaly.len() {
        return shape_err(format!("mask has {} pixels, map has {}", mask.len(), map.anomaly.len()));
    }
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &m)| if m { map.anomaly[i] } else { map.normal[i] })
        .collect())
}

/// `1 − (2Σyŷ + s)/(Σy + Σŷ + s)` on the anomaly channel.
pub fn dice_loss(pred: &[f64], mask: &[bool]) -> Result<f64> {
    let (num, den) = dice_terms(pred, mask)?;
    Ok(1.0 - num / den)
}

pub fn dice_loss_grad(pred: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let (num, den) = dice_terms(pred, mask)?;
    Ok(mask
        .iter()
        .map(|&y| {
            let y = if y { 1.0 } else { 0.0 };
            -(2.0 * y * den - num) / (den * den)
        })
        .collect())
}

fn dice_terms(pred: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != mask.len() {
        return shape_err(format!("prediction has {} pixels, mask has {}", pred.len(), mask.len()));
    }
    let mut inter = 0.0;
    let mut sum_y = 0.0;
    let mut sum_p = 0.0;
    for (&p, &m) in pred.iter().zip(mask) {
        if m {
            inter += p;
            sum_y += 1.0;
        }
        sum_p += p;
    }
    Ok((2.0 * inter + DICE_SMOOTH, sum_y + sum_p + DICE_SMOOTH))
}

/// Binary cross-entropy on the image anomaly probability.
pub fn bce_loss(p: f64, label: bool) -> f64 {
    bce_loss_pair(p, 1.0 - p, label)
}

pub fn bce_loss_grad(p: f64, label: bool) -> f64 {
    bce_loss_grad_pair(p, 1.0 - p, label)
}

/// [`bce_loss`] given both channel probabilities, so a negative label reads
/// `p_normal` directly instead of rounding through `1 − p_anomaly`.
pub fn bce_loss_pair(p_anomaly: f64, p_normal: f64, label: bool) -> f64 {
    if label {
        -clip(p_anomaly).ln()
    } else {
        -clip(p_normal).ln()
    }
}

/// Derivative of [`bce_loss_pair`] with respect to `p_anomaly`, taking
/// `p_normal = 1 − p_anomaly`.
pub fn bce_loss_grad_pair(p_anomaly: f64, p_normal: f64, label: bool) -> f64 {
    if label {
        -clip_slope(p_anomaly) / clip(p_anomaly)
    } else {
        clip_slope(p_normal) / clip(p_normal)
    }
}

/// Focal plus dice of one map.
pub fn map_loss(map: &AnomalyMap, mask: &[bool], gamma: f64) -> Result<f64> {
    let p_true = true_class_probs(map, mask)?;
    Ok(focal_loss(&p_true, gamma)? + dice_loss(&map.anomaly, mask)?)
}

/// Gradient of [`map_loss`] as `(d/d normal, d/d anomaly)` per pixel.
pub fn map_loss_grad(map: &AnomalyMap, mask: &[bool], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let p_true = true_class_probs(map, mask)?;
    let gf = focal_loss_grad(&p_true, gamma)?;
    let mut g_anomaly = dice_loss_grad(&map.anomaly, mask)?;
    let mut g_normal = vec![0.0; mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            g_anomaly[i] += gf[i];
        } else {
            g_normal[i] += gf[i];
        }
    }
    Ok((g_normal, g_anomaly))
}

/// Sum of focal + dice over every (level, scale) map.
pub fn seg_loss(maps: &[AnomalyMap], mask: &[bool], gamma: f64) -> Result<f64> {
    if maps.is_empty() {
        return domain_err("segmentation loss needs at least one map");
    }
    maps.iter().map(|m| map_loss(m, mask, gamma)).sum()
}

/// `seg + ac + λ_etf·etf + λ_bal·bal`.
pub fn total_loss(seg: f64, ac: f64, etf: f64, bal: f64, w: LossWeights) -> f64 {
    seg + ac + w.lambda_etf * etf + w.lambda_bal * bal
}
