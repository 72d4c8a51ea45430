//! Per-step training inputs: degraded references, their noisy latents, and
//! the masks the losses read.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Backbone, NoisyLatent};
use crate::dataset::{MaskSet, PairSpec};
use crate::degradation::{self, DegradationSchedule};
use crate::error::{Error, Result};
use crate::grid::{Mask, Planes};
use crate::seed::{self, Stream};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of {}";

/// Fills the pseudo-word into a training prompt template (`{}` placeholder).
pub fn training_prompt(template: &str, pseudo_word: &str) -> Result<String> {
    if template.matches("{}").count() != 1 {
        return Err(Error::config(
            "train.prompt_template",
            format!("`{template}` must contain exactly one `{{}}`"),
        ));
    }
    Ok(template.replace("{}", pseudo_word))
}

/// Uniform timestep range `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepRange {
    pub min: usize,
    pub max: usize,
}

impl TimestepRange {
    pub fn full(num_timesteps: usize) -> Self {
        TimestepRange {
            min: 0,
            max: num_timesteps,
        }
    }

    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        if self.min >= self.max || self.max > num_timesteps {
            return Err(Error::config(
                "train.timestep_max",
                format!(
                    "timestep range [{}, {}) must be non-empty and within [0, {num_timesteps})",
                    self.min, self.max
                ),
            ));
        }
        Ok(())
    }
}

/// Prompt tokens of one sample and the position-independent id of its pseudo-word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePrompt {
    pub text: String,
    pub tokens: Vec<usize>,
    pub pseudo_token: usize,
}

#[derive(Debug, Clone)]
pub struct ImageInput {
    pub sample: usize,
    pub image: usize,
    pub degraded: Planes,
    pub noisy: NoisyLatent,
    pub latent_mask: Mask,
    pub attn_mask: Mask,
}

/// Everything one optimization step reads, indexed `[sample][image]`.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub step: usize,
    pub alpha: f64,
    pub samples: Vec<Vec<ImageInput>>,
}

impl StepInputs {
    pub fn image_count(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn timesteps(&self) -> Vec<Vec<usize>> {
        self.samples
            .iter()
            .map(|imgs| imgs.iter().map(|i| i.noisy.timestep).collect())
            .collect()
    }
}

/// Degrades every reference at step `d` and noises its latent. All draws are
/// keyed by `(seed, d, sample, image)`.
pub fn prepare_step<B: Backbone + ?Sized>(
    backbone: &B,
    pair: &PairSpec,
    masks: &[Vec<MaskSet>],
    schedule: &DegradationSchedule,
    global_seed: u64,
    d: usize,
    timesteps: TimestepRange,
) -> Result<StepInputs> {
    let alpha = match schedule.mode {
        degradation::DegradationMode::MaskOut => 0.0,
        _ => schedule.intensity(d as i64)?,
    };
    let mut samples = Vec::with_capacity(pair.samples.len());
    for (n, sample) in pair.samples.iter().enumerate() {
        let mut imgs = Vec::with_capacity(sample.images.len());
        for (k, img) in sample.images.iter().enumerate() {
            let ms = &masks[n][k];
            let nseed = degradation::noise_seed(global_seed, d, n, k);
            let degraded = degradation::apply(schedule, &img.pixels, &ms.effective, d, nseed)?.pixels;
            let latent = backbone.encode_image(&degraded)?;
            let mut rng = seed::rng(global_seed, Stream::Diffusion, &[d as u64, n as u64, k as u64]);
            let t = rng.gen_range(timesteps.min..timesteps.max);
            let eps = Planes::from_shape_simple_fn(latent.dim(), || rng.sample(StandardNormal));
            let noisy = backbone.add_noise(&latent, &eps, t)?;
            imgs.push(ImageInput {
                sample: sample.index,
                image: k,
                degraded,
                noisy,
                latent_mask: ms.latent.clone(),
                attn_mask: ms.attention.clone(),
            });
        }
        samples.push(imgs);
    }
    Ok(StepInputs { step: d, alpha, samples })
}
