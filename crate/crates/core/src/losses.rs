//! Training objectives: classification BCE, Dice + Focal segmentation on points
//! and views, cross-view consistency, and the per-stage totals.
//!
//! Every loss exists twice: a plain `f64` version used for reporting and as an
//! independent reference, and a differentiable tensor version used by training.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    /// Weight of the consistency term in stage 2.
    pub consistency_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_gamma: 2.0, focal_alpha: 0.25, dice_smooth: 1.0, consistency_weight: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(&self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub cla: f64,
    pub seg: f64,
    pub con: f64,
    pub total: f64,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of a single probability.
pub fn loss_cla(prob: f64, label: bool) -> f64 {
    let p = clamp_prob(prob);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Soft Dice loss `1 - (2 sum(p y) + s) / (sum p + sum y + s)`.
pub fn dice(pred: &[f64], target: &[f64], smooth: f64) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, y)| p * y).sum();
    let sp: f64 = pred.iter().sum();
    let sy: f64 = target.iter().sum();
    1.0 - (2.0 * inter + smooth) / (sp + sy + smooth)
}

/// Mean binary focal loss with focusing `gamma` and positive-class weight `alpha`.
pub fn focal(pred: &[f64], target: &[f64], gamma: f64, alpha: f64) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(alpha * y * (1.0 - p).powf(gamma) * p.ln() + (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len() as f64
}

/// Dice + Focal on the point scores plus the view-averaged Dice + Focal on the maps.
pub fn loss_seg(
    point_scores: &[f64],
    point_labels: &[f64],
    maps: &[Vec<f64>],
    label_maps: &[Vec<f64>],
    config: &LossConfig,
) -> Result<f64> {
    if point_scores.len() != point_labels.len() || maps.len() != label_maps.len() {
        return Err(GsError::config("segmentation predictions and labels disagree in shape"));
    }
    let (g, a, s) = (config.focal_gamma, config.focal_alpha, config.dice_smooth);
    let mut total = dice(point_scores, point_labels, s) + focal(point_scores, point_labels, g, a);
    if !maps.is_empty() {
        let mut views = 0.0;
        for (m, y) in maps.iter().zip(label_maps) {
            if m.len() != y.len() {
                return Err(GsError::config("map and label map sizes differ"));
            }
            views += dice(m, y, s) + focal(m, y, g, a);
        }
        total += views / maps.len() as f64;
    }
    Ok(total)
}

/// `1 - mean_i cos(G_i, mean_j G_j)`.
pub fn loss_con(view_globals: &[Vec<f64>]) -> Result<f64> {
    if view_globals.is_empty() {
        return Err(GsError::config("consistency loss needs at least one view"));
    }
    let d = view_globals[0].len();
    let mut mean = vec![0.0; d];
    for g in view_globals {
        if g.len() != d {
            return Err(GsError::config("view features differ in dimension"));
        }
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x / view_globals.len() as f64;
        }
    }
    let mut acc = 0.0;
    for g in view_globals {
        acc += crate::scoring::cosine(g, &mean)?;
    }
    Ok((1.0 - acc / view_globals.len() as f64).clamp(0.0, 2.0))
}

/// Stage 1 ignores the consistency term; stage 2 adds it with weight `alpha`.
pub fn stage_total(stage: Stage, cla: f64, seg: f64, con: f64, alpha: f64) -> f64 {
    match stage {
        Stage::One => cla + seg,
        Stage::Two => cla + seg + alpha * con,
    }
}

// Differentiable counterparts over tensors.

/// BCE of a scalar probability tensor.
pub fn loss_cla_t(prob: &Tensor, label: bool) -> Result<Tensor> {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let l = if label { p.log()?.neg()? } else { p.affine(-1.0, 1.0)?.log()?.neg()? };
    Ok(l)
}

/// Dice over all elements of `pred` (any shape) against `target`.
pub fn dice_t(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    let inter = (pred * target)?.sum_all()?;
    let denom = ((pred.sum_all()? + target.sum_all()?)? + smooth)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

pub fn focal_t(pred: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = p.affine(-1.0, 1.0)?;
    let pos = (target * alpha)?.mul(&q.powf(gamma)?)?.mul(&p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * (1.0 - alpha))?.mul(&p.powf(gamma)?)?.mul(&q.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Segmentation loss with point scores `[n]` and view maps `[v, h, w]`.
pub fn loss_seg_t(
    point_scores: &Tensor,
    point_labels: &Tensor,
    maps: &Tensor,
    label_maps: &Tensor,
    config: &LossConfig,
) -> Result<Tensor> {
    let (g, a, s) = (config.focal_gamma, config.focal_alpha, config.dice_smooth);
    let points = (dice_t(point_scores, point_labels, s)? + focal_t(point_scores, point_labels, g, a)?)?;
    let v = maps.dim(0)?;
    let mut views: Option<Tensor> = None;
    for i in 0..v {
        let m = maps.get(i)?;
        let y = label_maps.get(i)?;
        let t = (dice_t(&m, &y, s)? + focal_t(&m, &y, g, a)?)?;
        views = Some(match views {
            None => t,
            Some(acc) => (acc + t)?,
        });
    }
    match views {
        Some(vt) => Ok((points + (vt / v as f64)?)?),
        None => Ok(points),
    }
}

/// Row-wise unit normalization with a small floor on the norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&n)?)
}

/// Consistency loss over `[v, d]` view features.
pub fn loss_con_t(view_globals: &Tensor) -> Result<Tensor> {
    let mean = view_globals.mean_keepdim(0)?;
    let cos = l2_normalize(view_globals)?.broadcast_mul(&l2_normalize(&mean)?)?.sum(D::Minus1)?;
    Ok(cos.mean_all()?.affine(-1.0, 1.0)?)
}
