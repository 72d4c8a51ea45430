//! Dual-stream balancing: per-step routing of samples into the max-loss
//! target and the preserved set, an EMA momentum teacher, and the objective
//! functions of both training stages with their parameter gradients.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterState, Backbone, ForwardPass};
use crate::batch::{prepare_step, SamplePrompt, StepInputs, TimestepRange};
use crate::dataset::{MaskSet, PairSpec};
use crate::degradation::DegradationSchedule;
use crate::error::{Error, Result};
use crate::grid::Planes;
use crate::losses::{self, AttnScope, LossWeights, PerSampleLoss, Reduction};

pub const DEFAULT_BETA: f64 = 0.99;

/// How the momentum parameters evolve during balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// `m <- beta * m + (1 - beta) * online` after every optimizer step.
    #[default]
    Ema,
    /// Keeps the warm-up result for the whole stage.
    FrozenWarmup,
    /// Holds the online parameters from one step earlier.
    PreviousStep,
}

impl TeacherMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherMode::Ema => "ema",
            TeacherMode::FrozenWarmup => "frozen_warmup",
            TeacherMode::PreviousStep => "previous_step",
        }
    }
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumTracker {
    pub beta: f64,
    pub teacher: TeacherMode,
    pub params: AdapterState,
    pub steps: u64,
}

/// Teacher starting as an exact copy of the online parameters.
pub fn init_momentum(online: &AdapterState, beta: f64, teacher: TeacherMode) -> Result<MomentumTracker> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("dsbal.beta", format!("{beta} outside [0, 1]")));
    }
    Ok(MomentumTracker {
        beta,
        teacher,
        params: online.clone(),
        steps: 0,
    })
}

/// `m <- beta * m + (1 - beta) * online`, elementwise.
pub fn ema_update(tracker: &mut MomentumTracker, online: &AdapterState) -> Result<()> {
    tracker.params.check_layout(online)?;
    let b = tracker.beta;
    let mut m = tracker.params.flatten();
    for (mv, &o) in m.iter_mut().zip(online.flatten().iter()) {
        *mv = b * *mv + (1.0 - b) * o;
    }
    tracker.params.unflatten(&m)?;
    tracker.steps += 1;
    Ok(())
}

impl MomentumTracker {
    /// Advances the teacher after one optimizer step, given the online
    /// parameters before and after that step.
    pub fn advance(&mut self, before: &AdapterState, after: &AdapterState) -> Result<()> {
        match self.teacher {
            TeacherMode::Ema => ema_update(self, after),
            TeacherMode::FrozenWarmup => {
                self.params.check_layout(after)?;
                self.steps += 1;
                Ok(())
            }
            TeacherMode::PreviousStep => {
                self.params.check_layout(before)?;
                self.params = before.clone();
                self.steps += 1;
                Ok(())
            }
        }
    }
}

/// Sample selected for optimization and the samples preserved by the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub n_max: usize,
    pub preserved: Vec<usize>,
    pub losses: Vec<f64>,
}

pub fn route(per_sample: &[PerSampleLoss]) -> Result<RoutingDecision> {
    let (n_max, _) = losses::diff_max(per_sample)?;
    Ok(RoutingDecision {
        n_max,
        preserved: per_sample.iter().map(|s| s.sample).filter(|&n| n != n_max).collect(),
        losses: per_sample.iter().map(|s| s.value).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Dsbal,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Dsbal => "dsbal",
        })
    }
}

/// Losses of one optimization step. `l_diff` is the joint mean during
/// warm-up and the selected sample's loss during balancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLossReport {
    pub stage: Stage,
    pub step: usize,
    pub alpha: f64,
    pub per_sample: Vec<PerSampleLoss>,
    pub n_max: Option<usize>,
    pub preserved: Vec<usize>,
    pub l_diff: f64,
    pub l_pres: f64,
    pub l_attn: f64,
    pub total: f64,
    pub timesteps: Vec<Vec<usize>>,
}

impl StepLossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_diff.is_finite()
            && self.l_pres.is_finite()
            && self.l_attn.is_finite()
            && self.per_sample.iter().all(|s| s.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub attn_scope: AttnScope,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            weights: LossWeights::default(),
            reduction: Reduction::FullGrid,
            attn_scope: AttnScope::All,
        }
    }
}

fn check_prompts(inputs: &StepInputs, prompts: &[SamplePrompt]) -> Result<()> {
    if prompts.len() != inputs.samples.len() {
        return Err(Error::Shape(format!(
            "{} prompts for {} samples",
            prompts.len(),
            inputs.samples.len()
        )));
    }
    if inputs.samples.iter().any(Vec::is_empty) {
        return Err(Error::Loss("sample without images".into()));
    }
    Ok(())
}

/// Warm-up objective: joint masked diffusion loss plus weighted attention loss.
pub fn warmup_objective<B: Backbone + ?Sized>(
    backbone: &B,
    adapter: &AdapterState,
    inputs: &StepInputs,
    prompts: &[SamplePrompt],
    settings: &ObjectiveSettings,
) -> Result<(StepLossReport, AdapterState)> {
    check_prompts(inputs, prompts)?;
    let n_samples = inputs.samples.len() as f64;
    let total_images = inputs.image_count() as f64;
    let w = &settings.weights;
    let mut grads = adapter.zeros_like();
    let mut per_sample = Vec::with_capacity(inputs.samples.len());
    let mut attn_sum = 0.0;
    for (imgs, prompt) in inputs.samples.iter().zip(prompts) {
        let k = imgs.len() as f64;
        let mut diff_sum = 0.0;
        for img in imgs {
            let pass = backbone.forward(
                adapter,
                &img.noisy.latent,
                img.noisy.timestep,
                &prompt.tokens,
                Some(prompt.pseudo_token),
            )?;
            let attn = attention_of(&pass)?;
            diff_sum += losses::masked_diffusion_loss(&img.noisy.noise, &pass.prediction, &img.latent_mask, settings.reduction)?;
            attn_sum += losses::cross_attention_loss(attn, &img.attn_mask)?;
            let gp = losses::masked_diffusion_grad(&img.noisy.noise, &pass.prediction, &img.latent_mask, settings.reduction)?
                * (1.0 / (n_samples * k));
            let ga = losses::cross_attention_grad(attn, &img.attn_mask)? * (w.lambda_attn / total_images);
            backbone.backward(adapter, &pass, &gp, Some(&ga), &mut grads)?;
        }
        per_sample.push(PerSampleLoss {
            sample: imgs[0].sample,
            value: diff_sum / k,
            images: imgs.len(),
        });
    }
    let l_diff = losses::mean(&per_sample.iter().map(|s| s.value).collect::<Vec<_>>());
    let l_attn = attn_sum / total_images;
    let report = StepLossReport {
        stage: Stage::Warmup,
        step: inputs.step,
        alpha: inputs.alpha,
        per_sample,
        n_max: None,
        preserved: Vec::new(),
        l_diff,
        l_pres: 0.0,
        l_attn,
        total: losses::warmup_total(l_diff, l_attn, w),
        timesteps: inputs.timesteps(),
    };
    Ok((report, grads))
}

fn attention_of<C>(pass: &ForwardPass<C>) -> Result<&ndarray::Array2<f64>> {
    pass.attention
        .as_ref()
        .ok_or_else(|| Error::Backbone("backend returned no attention map".into()))
}

/// Balancing objective: the max-loss sample's diffusion loss, the teacher's
/// preserving loss on the remaining samples, and the attention loss.
/// Gradients reach only the online parameters.
pub fn dsbal_objective<B: Backbone + ?Sized>(
    backbone: &B,
    online: &AdapterState,
    momentum: &AdapterState,
    inputs: &StepInputs,
    prompts: &[SamplePrompt],
    settings: &ObjectiveSettings,
) -> Result<(StepLossReport, AdapterState)> {
    check_prompts(inputs, prompts)?;
    online.check_layout(momentum)?;
    let w = &settings.weights;
    let mut passes = Vec::with_capacity(inputs.samples.len());
    let mut per_sample = Vec::with_capacity(inputs.samples.len());
    for (imgs, prompt) in inputs.samples.iter().zip(prompts) {
        let mut sample_passes = Vec::with_capacity(imgs.len());
        let mut diff_sum = 0.0;
        for img in imgs {
            let pass = backbone.forward(
                online,
                &img.noisy.latent,
                img.noisy.timestep,
                &prompt.tokens,
                Some(prompt.pseudo_token),
            )?;
            diff_sum += losses::masked_diffusion_loss(&img.noisy.noise, &pass.prediction, &img.latent_mask, settings.reduction)?;
            sample_passes.push(pass);
        }
        per_sample.push(PerSampleLoss {
            sample: imgs[0].sample,
            value: diff_sum / imgs.len() as f64,
            images: imgs.len(),
        });
        passes.push(sample_passes);
    }
    let decision = route(&per_sample)?;
    let max_pos = per_sample
        .iter()
        .position(|s| s.sample == decision.n_max)
        .expect("routing picks an existing sample");
    let l_diff_max = per_sample[max_pos].value;

    let attn_images: usize = match settings.attn_scope {
        AttnScope::All => inputs.image_count(),
        AttnScope::MaxOnly => inputs.samples[max_pos].len(),
    };
    let n_pres = decision.preserved.len() as f64;
    let mut grads = online.zeros_like();
    let mut attn_sum = 0.0;
    let mut pres_means = Vec::with_capacity(decision.preserved.len());
    for (pos, ((imgs, prompt), sample_passes)) in inputs.samples.iter().zip(prompts).zip(&passes).enumerate() {
        let k = imgs.len() as f64;
        let is_max = pos == max_pos;
        let mut pres_sum = 0.0;
        for (img, pass) in imgs.iter().zip(sample_passes) {
            let gp = if is_max {
                losses::masked_diffusion_grad(&img.noisy.noise, &pass.prediction, &img.latent_mask, settings.reduction)? * (1.0 / k)
            } else {
                let teacher: Planes = backbone.predict_noise(momentum, &img.noisy.latent, img.noisy.timestep, &prompt.tokens)?;
                pres_sum += losses::preserving_loss(&teacher, &pass.prediction, &img.latent_mask, settings.reduction)?;
                losses::preserving_grad(&teacher, &pass.prediction, &img.latent_mask, settings.reduction)?
                    * (w.lambda_pres / (n_pres * k))
            };
            let ga = if is_max || settings.attn_scope == AttnScope::All {
                let attn = attention_of(pass)?;
                attn_sum += losses::cross_attention_loss(attn, &img.attn_mask)?;
                Some(losses::cross_attention_grad(attn, &img.attn_mask)? * (w.lambda_attn / attn_images as f64))
            } else {
                None
            };
            backbone.backward(online, pass, &gp, ga.as_ref(), &mut grads)?;
        }
        if !is_max {
            pres_means.push(pres_sum / k);
        }
    }
    let l_pres = losses::mean(&pres_means);
    let l_attn = attn_sum / attn_images as f64;
    let report = StepLossReport {
        stage: Stage::Dsbal,
        step: inputs.step,
        alpha: inputs.alpha,
        per_sample,
        n_max: Some(decision.n_max),
        preserved: decision.preserved,
        l_diff: l_diff_max,
        l_pres,
        l_attn,
        total: losses::dsbal_total(l_diff_max, l_pres, l_attn, w),
        timesteps: inputs.timesteps(),
    };
    Ok((report, grads))
}

/// Shared state of one balancing step.
pub struct DsbalContext<'a> {
    pub pair: &'a PairSpec,
    pub masks: &'a [Vec<MaskSet>],
    pub prompts: &'a [SamplePrompt],
    pub schedule: &'a DegradationSchedule,
    pub settings: ObjectiveSettings,
    pub seed: u64,
    pub timesteps: TimestepRange,
}

/// Degrades and noises the references at step `d`, then evaluates the
/// balancing objective. The caller applies the optimizer to the returned
/// gradients and advances the tracker afterwards.
pub fn dsbal_step<B: Backbone + ?Sized>(
    ctx: &DsbalContext<'_>,
    backbone: &B,
    online: &AdapterState,
    tracker: &MomentumTracker,
    d: usize,
) -> Result<(StepLossReport, AdapterState)> {
    let inputs = prepare_step(backbone, ctx.pair, ctx.masks, ctx.schedule, ctx.seed, d, ctx.timesteps)?;
    dsbal_objective(backbone, online, &tracker.params, &inputs, ctx.prompts, &ctx.settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LoraPair;
    use ndarray::Array2;

    fn state(v: f64) -> AdapterState {
        AdapterState {
            rank: 1,
            alpha: 1.0,
            lora: vec![LoraPair {
                name: "q".into(),
                down: Array2::from_elem((1, 2), v),
                up: Array2::from_elem((2, 1), v),
            }],
            pseudo_embeddings: Array2::from_elem((2, 3), v),
            pseudo_tokens: vec![5, 6],
        }
    }

    #[test]
    fn ema_single_step() {
        let mut t = init_momentum(&state(1.0), 0.99, TeacherMode::Ema).unwrap();
        ema_update(&mut t, &state(0.0)).unwrap();
        assert!(t.params.flatten().iter().all(|&v| v == 0.99));
    }

    #[test]
    fn ema_degenerate_betas() {
        let mut t = init_momentum(&state(1.0), 1.0, TeacherMode::Ema).unwrap();
        ema_update(&mut t, &state(0.3)).unwrap();
        assert_eq!(t.params, state(1.0));
        let mut t = init_momentum(&state(1.0), 0.0, TeacherMode::Ema).unwrap();
        ema_update(&mut t, &state(0.3)).unwrap();
        assert_eq!(t.params, state(0.3));
    }

    #[test]
    fn ema_fixed_point_and_layout() {
        let mut t = init_momentum(&state(0.4), 0.99, TeacherMode::Ema).unwrap();
        ema_update(&mut t, &state(0.4)).unwrap();
        assert_eq!(t.params, state(0.4));
        let mut other = state(0.4);
        other.pseudo_embeddings = Array2::zeros((1, 3));
        assert!(ema_update(&mut t, &other).is_err());
        assert!(init_momentum(&state(0.0), 1.5, TeacherMode::Ema).is_err());
    }

    #[test]
    fn teacher_modes() {
        let mut frozen = init_momentum(&state(1.0), 0.99, TeacherMode::FrozenWarmup).unwrap();
        frozen.advance(&state(1.0), &state(0.0)).unwrap();
        assert_eq!(frozen.params, state(1.0));
        let mut prev = init_momentum(&state(1.0), 0.99, TeacherMode::PreviousStep).unwrap();
        prev.advance(&state(0.5), &state(0.2)).unwrap();
        assert_eq!(prev.params, state(0.5));
    }

    fn losses_of(v: &[f64]) -> Vec<PerSampleLoss> {
        v.iter()
            .enumerate()
            .map(|(i, &value)| PerSampleLoss {
                sample: i + 1,
                value,
                images: 1,
            })
            .collect()
    }

    #[test]
    fn routing_complements() {
        let d = route(&losses_of(&[0.1, 0.9])).unwrap();
        assert_eq!((d.n_max, d.preserved.clone()), (2, vec![1]));
        let d = route(&losses_of(&[0.4, 0.2, 0.3])).unwrap();
        assert_eq!((d.n_max, d.preserved), (1, vec![2, 3]));
    }

    proptest::proptest! {
        #[test]
        fn ema_geometric_closed_form(
            m0 in proptest::collection::vec(-3.0f64..3.0, 10),
            on in proptest::collection::vec(-3.0f64..3.0, 10),
            beta in 0.0f64..1.0,
            k in 1u32..60,
        ) {
            let mut a = state(0.0);
            a.unflatten(&m0).unwrap();
            let mut online = state(0.0);
            online.unflatten(&on).unwrap();
            let mut t = init_momentum(&a, beta, TeacherMode::Ema).unwrap();
            for _ in 0..k {
                ema_update(&mut t, &online).unwrap();
            }
            let bk = beta.powi(k as i32);
            for ((got, &x0), &x) in t.params.flatten().iter().zip(&m0).zip(&on) {
                let expect = bk * x0 + (1.0 - bk) * x;
                proptest::prop_assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }
}
