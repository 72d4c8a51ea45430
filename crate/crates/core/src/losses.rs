//! Loss terms and their weighted totals.
//!
//! Predictions and noise are `(C, H, W)` latents; latent masks are `(H, W)`
//! and broadcast over channels. Every loss has a matching `*_grad` giving the
//! derivative with respect to the online prediction (or attention map).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{is_binary, Mask, Planes};

pub const DEFAULT_LAMBDA_ATTN: f64 = 0.01;
pub const DEFAULT_LAMBDA_PRES: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_attn: f64,
    pub lambda_pres: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_attn: DEFAULT_LAMBDA_ATTN,
            lambda_pres: DEFAULT_LAMBDA_PRES,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("loss.lambda_attn", self.lambda_attn), ("loss.lambda_pres", self.lambda_pres)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// Denominator of the masked squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over every latent element, masked-out cells counted as zeros.
    #[default]
    FullGrid,
    /// Mean over masked elements only.
    MaskArea,
}

/// Which samples the attention term covers during balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScope {
    #[default]
    All,
    MaxOnly,
}

fn check_masked(target: &Planes, pred: &Planes, mask: &Mask) -> Result<()> {
    if target.dim() != pred.dim() {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", target.dim(), pred.dim())));
    }
    let (_, h, w) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} vs latent {:?}", mask.dim(), (h, w))));
    }
    if !is_binary(mask) {
        return Err(Error::Loss("latent mask is not binary".into()));
    }
    Ok(())
}

fn denominator(pred: &Planes, mask: &Mask, reduction: Reduction) -> f64 {
    let c = pred.dim().0;
    match reduction {
        Reduction::FullGrid => pred.len() as f64,
        Reduction::MaskArea => (c * mask.iter().filter(|&&m| m == 1).count()) as f64,
    }
}

/// Mean of `((target - pred) * mask)^2`.
pub fn masked_diffusion_loss(target: &Planes, pred: &Planes, mask: &Mask, reduction: Reduction) -> Result<f64> {
    check_masked(target, pred, mask)?;
    let denom = denominator(pred, mask, reduction);
    if denom == 0.0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for ((( _, y, x), &p), &t) in pred.indexed_iter().zip(target.iter()) {
        if mask[[y, x]] == 1 {
            let d = t - p;
            sum += d * d;
        }
    }
    Ok(sum / denom)
}

/// Derivative of [`masked_diffusion_loss`] with respect to `pred`.
pub fn masked_diffusion_grad(target: &Planes, pred: &Planes, mask: &Mask, reduction: Reduction) -> Result<Planes> {
    check_masked(target, pred, mask)?;
    let denom = denominator(pred, mask, reduction);
    let mut g = Planes::zeros(pred.dim());
    if denom == 0.0 {
        return Ok(g);
    }
    for ((y_idx, gv), (&p, &t)) in g.indexed_iter_mut().zip(pred.iter().zip(target.iter())) {
        let (_, y, x) = y_idx;
        if mask[[y, x]] == 1 {
            *gv = 2.0 * (p - t) / denom;
        }
    }
    Ok(g)
}

/// Masked squared error between the momentum and online predictions.
pub fn preserving_loss(momentum: &Planes, online: &Planes, mask: &Mask, reduction: Reduction) -> Result<f64> {
    masked_diffusion_loss(momentum, online, mask, reduction)
}

/// Derivative of [`preserving_loss`] with respect to the online prediction.
pub fn preserving_grad(momentum: &Planes, online: &Planes, mask: &Mask, reduction: Reduction) -> Result<Planes> {
    masked_diffusion_grad(momentum, online, mask, reduction)
}

fn check_attention(attn: &ndarray::Array2<f64>, mask: &Mask) -> Result<()> {
    if attn.dim() != mask.dim() {
        return Err(Error::Shape(format!("attention {:?} vs mask {:?}", attn.dim(), mask.dim())));
    }
    Ok(())
}

/// Mean of `(A - M'')^2` over all cells.
pub fn cross_attention_loss(attn: &ndarray::Array2<f64>, mask: &Mask) -> Result<f64> {
    check_attention(attn, mask)?;
    let sum: f64 = attn
        .iter()
        .zip(mask.iter())
        .map(|(&a, &m)| {
            let d = a - m as f64;
            d * d
        })
        .sum();
    Ok(sum / attn.len() as f64)
}

pub fn cross_attention_grad(attn: &ndarray::Array2<f64>, mask: &Mask) -> Result<ndarray::Array2<f64>> {
    check_attention(attn, mask)?;
    let n = attn.len() as f64;
    let mut g = attn.clone();
    g.zip_mut_with(mask, |a, &m| *a = 2.0 * (*a - m as f64) / n);
    Ok(g)
}

pub fn warmup_total(l_diff: f64, l_attn: f64, w: &LossWeights) -> f64 {
    l_diff + w.lambda_attn * l_attn
}

pub fn dsbal_total(l_diff_max: f64, l_pres: f64, l_attn: f64, w: &LossWeights) -> f64 {
    l_diff_max + w.lambda_pres * l_pres + w.lambda_attn * l_attn
}

/// Masked diffusion loss of one sample, averaged over its images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerSampleLoss {
    /// 1-based sample index.
    pub sample: usize,
    pub value: f64,
    pub images: usize,
}

/// Sample with the largest loss; ties go to the smallest index.
pub fn diff_max(per_sample: &[PerSampleLoss]) -> Result<(usize, f64)> {
    let mut best: Option<&PerSampleLoss> = None;
    for s in per_sample {
        best = match best {
            None => Some(s),
            Some(b) if s.value > b.value || (s.value == b.value && s.sample < b.sample) => Some(s),
            keep => keep,
        };
    }
    best.map(|b| (b.sample, b.value))
        .ok_or_else(|| Error::Loss("diff_max over an empty sample list".into()))
}

/// Plain mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
