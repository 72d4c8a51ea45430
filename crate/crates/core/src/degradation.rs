//! Masked degradation of reference images with a scheduled intensity.
//!
//! Each training step perturbs the out-of-mask region of every reference
//! image with fresh Gaussian noise scaled by `alpha_d`. In the default
//! dynamic mode `alpha_d = alpha_init * (1 - (d / D)^gamma)`, which stays
//! close to `alpha_init` for most of training and collapses to zero at the end.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_same_spatial, Mask, Planes};
use crate::seed::{self, Stream};

pub const DEFAULT_ALPHA_INIT: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    Dynamic,
    Fixed,
    LinearAscent,
    LinearDescent,
    Off,
    /// Replace the out-of-mask region with zeros instead of adding noise.
    MaskOut,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 6] = [
        DegradationMode::Dynamic,
        DegradationMode::Fixed,
        DegradationMode::LinearAscent,
        DegradationMode::LinearDescent,
        DegradationMode::Off,
        DegradationMode::MaskOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationMode::Dynamic => "dynamic",
            DegradationMode::Fixed => "fixed",
            DegradationMode::LinearAscent => "linear_ascent",
            DegradationMode::LinearDescent => "linear_descent",
            DegradationMode::Off => "off",
            DegradationMode::MaskOut => "mask_out",
        }
    }
}

impl fmt::Display for DegradationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSchedule {
    pub mode: DegradationMode,
    pub alpha_init: f64,
    pub gamma: f64,
    /// Constant intensity used by [`DegradationMode::Fixed`].
    pub fixed_alpha: f64,
    pub total_steps: usize,
}

impl DegradationSchedule {
    pub fn dynamic(total_steps: usize) -> Self {
        DegradationSchedule {
            mode: DegradationMode::Dynamic,
            alpha_init: DEFAULT_ALPHA_INIT,
            gamma: DEFAULT_GAMMA,
            fixed_alpha: DEFAULT_ALPHA_INIT,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return Err(Error::Schedule(format!("alpha_init {} outside [0, 1]", self.alpha_init)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Schedule(format!("gamma {} must be positive", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.fixed_alpha) {
            return Err(Error::Schedule(format!("fixed alpha {} outside [0, 1]", self.fixed_alpha)));
        }
        if self.total_steps == 0 {
            return Err(Error::Schedule("total steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Degradation intensity at step `d`, for `0 <= d <= total_steps`.
    pub fn intensity(&self, d: i64) -> Result<f64> {
        if d < 0 {
            return Err(Error::Schedule(format!("step {d} is negative")));
        }
        let total = self.total_steps;
        if d as u64 > total as u64 {
            return Err(Error::Schedule(format!("step {d} exceeds total steps {total}")));
        }
        let ratio = d as f64 / total as f64;
        Ok(match self.mode {
            DegradationMode::Dynamic => self.alpha_init * (1.0 - ratio.powf(self.gamma)),
            DegradationMode::Fixed => self.fixed_alpha,
            DegradationMode::LinearAscent => ratio,
            DegradationMode::LinearDescent => 1.0 - ratio,
            DegradationMode::Off | DegradationMode::MaskOut => 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedImage {
    pub pixels: Planes,
    pub step: usize,
    pub seed: u64,
}

/// Noise seed for image `k` of sample `n` at step `d`.
pub fn noise_seed(global_seed: u64, step: usize, sample: usize, image: usize) -> u64 {
    seed::derive(global_seed, Stream::Degradation, &[step as u64, sample as u64, image as u64])
}

fn check_shapes(image: &Planes, mask: &Mask) -> Result<()> {
    let (_, h, w) = image.dim();
    check_same_spatial((h, w), mask.dim(), "image vs mask")
}

/// Adds `alpha * G` outside the mask, `G ~ N(0, 1)` drawn from `seed`.
/// No clamping: the result may leave `[-1, 1]`.
pub fn degrade(image: &Planes, mask: &Mask, alpha: f64, seed: u64, step: usize) -> Result<DegradedImage> {
    check_shapes(image, mask)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Schedule(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = image.clone();
    // one draw per element regardless of the mask, so noise is a function of the seed alone
    for ((_, y, x), v) in pixels.indexed_iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        if mask[[y, x]] == 0 {
            *v += alpha * g;
        }
    }
    Ok(DegradedImage { pixels, step, seed })
}

/// Zeroes the out-of-mask region.
pub fn mask_out(image: &Planes, mask: &Mask) -> Result<Planes> {
    check_shapes(image, mask)?;
    let mut out = image.clone();
    for ((_, y, x), v) in out.indexed_iter_mut() {
        if mask[[y, x]] == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Applies the schedule's mode at step `d`.
pub fn apply(
    schedule: &DegradationSchedule,
    image: &Planes,
    mask: &Mask,
    d: usize,
    seed: u64,
) -> Result<DegradedImage> {
    match schedule.mode {
        DegradationMode::MaskOut => Ok(DegradedImage {
            pixels: mask_out(image, mask)?,
            step: d,
            seed,
        }),
        _ => degrade(image, mask, schedule.intensity(d as i64)?, seed, d),
    }
}
