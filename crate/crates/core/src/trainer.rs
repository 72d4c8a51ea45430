//! Two-stage training: joint warm-up, then dual-stream balancing.
//!
//! The degradation step index runs over both stages: warm-up uses
//! `d = 0..warmup_steps` and balancing continues from there, one index per
//! optimizer step. Each stage starts a fresh AdamW state.

use std::path::PathBuf;

use crate::backbone::{AdapterState, Backbone};
use crate::batch::{self, prepare_step, SamplePrompt, StepInputs, TimestepRange, DEFAULT_PROMPT_TEMPLATE};
use crate::dataset::{self, prepare_masks, MaskSet, PairSpec};
use crate::degradation::DegradationSchedule;
use crate::dual_stream::{
    dsbal_step, init_momentum, warmup_objective, DsbalContext, MomentumTracker, ObjectiveSettings, Stage,
    StepLossReport, TeacherMode, DEFAULT_BETA,
};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{register_pseudo_words, TokenBindings};

pub const DEFAULT_WARMUP_STEPS: usize = 200;
pub const DEFAULT_DSBAL_STEPS: usize = 300;
pub const DEFAULT_WARMUP_LR: f64 = 1e-4;
pub const DEFAULT_DSBAL_LR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub warmup_steps: usize,
    pub dsbal_steps: usize,
    pub warmup_lr: f64,
    /// Learning rate of the pseudo-word embeddings; `None` reuses `warmup_lr`.
    pub warmup_embedding_lr: Option<f64>,
    pub dsbal_lr: f64,
    pub dsbal_embedding_lr: Option<f64>,
    /// Multiply learning rates by the number of images per step.
    pub lr_batch_scaling: bool,
    pub objective: ObjectiveSettings,
    pub beta: f64,
    pub teacher: TeacherMode,
    pub schedule: DegradationSchedule,
    /// `None` samples uniformly over all backbone timesteps.
    pub timesteps: Option<TimestepRange>,
    pub optimizer: AdamWConfig,
    pub prompt_template: String,
    /// Writes every degraded reference as an 8-bit PNG under this directory.
    pub dump_degraded: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            dsbal_steps: DEFAULT_DSBAL_STEPS,
            warmup_lr: DEFAULT_WARMUP_LR,
            warmup_embedding_lr: None,
            dsbal_lr: DEFAULT_DSBAL_LR,
            dsbal_embedding_lr: None,
            lr_batch_scaling: true,
            objective: ObjectiveSettings::default(),
            beta: DEFAULT_BETA,
            teacher: TeacherMode::Ema,
            schedule: DegradationSchedule::dynamic(schedule_length(DEFAULT_WARMUP_STEPS, DEFAULT_DSBAL_STEPS)),
            timesteps: None,
            optimizer: AdamWConfig::default(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            dump_degraded: None,
        }
    }
}

/// Default `D`: the index of the final optimizer step, so the last step runs
/// without degradation.
pub fn schedule_length(warmup_steps: usize, dsbal_steps: usize) -> usize {
    (warmup_steps + dsbal_steps).saturating_sub(1).max(1)
}

/// Effective `(adapter, embedding)` learning rates of a stage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageRates {
    pub adapter: f64,
    pub embedding: f64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.objective.weights.validate()?;
        if self.dsbal_steps == 0 && self.warmup_steps == 0 {
            return Err(Error::config("warmup.steps", "at least one training step is required"));
        }
        let last = self.warmup_steps + self.dsbal_steps - 1;
        if last > self.schedule.total_steps {
            return Err(Error::config(
                "degradation.total_steps",
                format!("{} is shorter than the {} training steps", self.schedule.total_steps, last + 1),
            ));
        }
        for (key, v) in [
            ("warmup.lr", Some(self.warmup_lr)),
            ("warmup.embedding_lr", self.warmup_embedding_lr),
            ("dsbal.lr", Some(self.dsbal_lr)),
            ("dsbal.embedding_lr", self.dsbal_embedding_lr),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(key, format!("learning rate {v} must be positive")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("dsbal.beta", format!("{} outside [0, 1]", self.beta)));
        }
        batch::training_prompt(&self.prompt_template, "<x>")?;
        Ok(())
    }

    fn scale(&self, images: usize) -> f64 {
        if self.lr_batch_scaling {
            images as f64
        } else {
            1.0
        }
    }

    pub fn rates(&self, stage: Stage, images: usize) -> StageRates {
        let s = self.scale(images);
        let (lr, emb) = match stage {
            Stage::Warmup => (self.warmup_lr, self.warmup_embedding_lr),
            Stage::Dsbal => (self.dsbal_lr, self.dsbal_embedding_lr),
        };
        StageRates {
            adapter: lr * s,
            embedding: emb.unwrap_or(lr) * s,
        }
    }
}

/// A pair bound to a backbone: pseudo-words registered, masks prepared,
/// training prompts tokenized.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub pair: PairSpec,
    pub masks: Vec<Vec<MaskSet>>,
    pub bindings: TokenBindings,
    pub prompts: Vec<SamplePrompt>,
    pub settings: TrainSettings,
    pub timesteps: TimestepRange,
}

impl TrainSetup {
    pub fn new<B: Backbone + ?Sized>(backbone: &mut B, pair: PairSpec, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        if pair.resolution != backbone.resolution() {
            return Err(Error::config(
                "backbone.resolution",
                format!(
                    "backbone runs at {} px but pair `{}` is {} px",
                    backbone.resolution(),
                    pair.pair_id,
                    pair.resolution
                ),
            ));
        }
        let timesteps = settings.timesteps.unwrap_or(TimestepRange::full(backbone.num_timesteps()));
        timesteps.validate(backbone.num_timesteps())?;
        let masks = prepare_masks(&pair, backbone.latent_dims().spatial(), backbone.attn_dims())?;
        let bindings = register_pseudo_words(&pair, backbone.tokenizer_mut())?;
        let prompts = bindings
            .iter()
            .map(|b| {
                let text = batch::training_prompt(&settings.prompt_template, &b.pseudo_word)?;
                Ok(SamplePrompt {
                    tokens: backbone.tokenize(&text)?,
                    text,
                    pseudo_token: b.token_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSetup {
            pair,
            masks,
            bindings,
            prompts,
            settings,
            timesteps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.settings.warmup_steps + self.settings.dsbal_steps
    }

    pub fn init_adapter<B: Backbone + ?Sized>(&self, backbone: &B) -> Result<AdapterState> {
        backbone.init_adapter(&self.bindings, self.settings.seed)
    }

    pub fn prepare<B: Backbone + ?Sized>(&self, backbone: &B, d: usize) -> Result<StepInputs> {
        let inputs = prepare_step(
            backbone,
            &self.pair,
            &self.masks,
            &self.settings.schedule,
            self.settings.seed,
            d,
            self.timesteps,
        )?;
        if let Some(dir) = &self.settings.dump_degraded {
            for imgs in &inputs.samples {
                for img in imgs {
                    let path = dir.join(format!("step_{d:05}")).join(format!("s{}_k{}.png", img.sample, img.image));
                    let rgb = dataset::planes_to_rgb(&img.degraded);
                    dataset::save_png(&image::DynamicImage::ImageRgb8(rgb), &path)?;
                }
            }
        }
        Ok(inputs)
    }
}

/// Receives every step report as it is produced.
pub type StepSink<'a> = dyn FnMut(&StepLossReport) -> Result<()> + 'a;

fn check_finite(report: &StepLossReport, grads: &AdapterState) -> Result<()> {
    if report.is_finite() && grads.flatten().iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite {
        stage: report.stage.to_string(),
        step: report.step,
        report: serde_json::to_string(report).unwrap_or_else(|_| format!("{report:?}")),
    })
}

fn optimizer_step(opt: &mut AdamW, adapter: &mut AdapterState, grads: &AdapterState, rates: StageRates) -> Result<()> {
    let split = adapter.num_lora_params();
    let mut params = adapter.flatten();
    opt.step(&mut params, &grads.flatten(), |i| {
        if i < split {
            rates.adapter
        } else {
            rates.embedding
        }
    })?;
    adapter.unflatten(&params)
}

/// Warm-up stage; returns the adapter after `warmup_steps` updates.
pub fn run_warmup<B: Backbone + ?Sized>(
    setup: &TrainSetup,
    backbone: &B,
    initial: AdapterState,
    sink: &mut StepSink<'_>,
) -> Result<AdapterState> {
    let s = &setup.settings;
    let mut adapter = initial;
    let rates = s.rates(Stage::Warmup, setup.pair.image_count());
    let mut opt = AdamW::new(s.optimizer, adapter.num_params());
    for d in 0..s.warmup_steps {
        let inputs = setup.prepare(backbone, d)?;
        let (report, grads) = warmup_objective(backbone, &adapter, &inputs, &setup.prompts, &s.objective)?;
        check_finite(&report, &grads)?;
        sink(&report)?;
        optimizer_step(&mut opt, &mut adapter, &grads, rates)?;
    }
    Ok(adapter)
}

/// Balancing stage starting from the warmed-up adapter.
pub fn run_dsbal<B: Backbone + ?Sized>(
    setup: &TrainSetup,
    backbone: &B,
    warmed: AdapterState,
    sink: &mut StepSink<'_>,
) -> Result<(AdapterState, MomentumTracker)> {
    let s = &setup.settings;
    let mut tracker = init_momentum(&warmed, s.beta, s.teacher)?;
    let mut online = warmed;
    let rates = s.rates(Stage::Dsbal, setup.pair.image_count());
    let mut opt = AdamW::new(s.optimizer, online.num_params());
    let ctx = DsbalContext {
        pair: &setup.pair,
        masks: &setup.masks,
        prompts: &setup.prompts,
        schedule: &s.schedule,
        settings: s.objective,
        seed: s.seed,
        timesteps: setup.timesteps,
    };
    for j in 0..s.dsbal_steps {
        let d = s.warmup_steps + j;
        if s.dump_degraded.is_some() {
            setup.prepare(backbone, d)?;
        }
        let (report, grads) = dsbal_step(&ctx, backbone, &online, &tracker, d)?;
        check_finite(&report, &grads)?;
        sink(&report)?;
        let before = online.clone();
        optimizer_step(&mut opt, &mut online, &grads, rates)?;
        tracker.advance(&before, &online)?;
    }
    Ok((online, tracker))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub warmed: AdapterState,
    pub online: AdapterState,
    pub tracker: MomentumTracker,
}

/// Both stages back to back from a freshly initialized adapter.
pub fn train<B: Backbone + ?Sized>(setup: &TrainSetup, backbone: &B, sink: &mut StepSink<'_>) -> Result<TrainOutcome> {
    let initial = setup.init_adapter(backbone)?;
    let warmed = run_warmup(setup, backbone, initial, sink)?;
    let (online, tracker) = run_dsbal(setup, backbone, warmed.clone(), sink)?;
    Ok(TrainOutcome {
        warmed,
        online,
        tracker,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::toy::{ToyBackbone, ToyConfig};
    use crate::dataset::synthetic_pair;

    fn small(settings: TrainSettings) -> (ToyBackbone, TrainSetup) {
        let mut bb = ToyBackbone::new(ToyConfig {
            resolution: 16,
            attn_size: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..ToyConfig::default()
        })
        .unwrap();
        let setup = TrainSetup::new(&mut bb, synthetic_pair(16, 2, 0), settings).unwrap();
        (bb, setup)
    }

    fn short() -> TrainSettings {
        TrainSettings {
            warmup_steps: 4,
            dsbal_steps: 4,
            schedule: DegradationSchedule::dynamic(schedule_length(4, 4)),
            ..TrainSettings::default()
        }
    }

    #[test]
    fn zero_warmup_returns_initial_adapter() {
        let (bb, setup) = small(TrainSettings {
            warmup_steps: 0,
            ..short()
        });
        let init = setup.init_adapter(&bb).unwrap();
        let out = run_warmup(&setup, &bb, init.clone(), &mut |_| Ok(())).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn step_indices_continue_across_stages() {
        let (bb, setup) = small(short());
        let mut steps = Vec::new();
        train(&setup, &bb, &mut |r| {
            steps.push((r.stage, r.step, r.alpha));
            Ok(())
        })
        .unwrap();
        assert_eq!(steps.iter().map(|s| s.1).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert!(steps[..4].iter().all(|s| s.0 == Stage::Warmup));
        assert_eq!(steps.last().unwrap().2, 0.0);
    }

    #[test]
    fn lr_scaling() {
        let s = TrainSettings {
            dsbal_embedding_lr: Some(3e-5),
            ..TrainSettings::default()
        };
        let w = s.rates(Stage::Warmup, 6);
        assert_eq!(w.adapter, 1e-4 * 6.0);
        assert_eq!(w.embedding, w.adapter);
        assert_eq!(s.rates(Stage::Dsbal, 6).embedding, 3e-5 * 6.0);
        let off = TrainSettings {
            lr_batch_scaling: false,
            ..TrainSettings::default()
        };
        assert_eq!(off.rates(Stage::Dsbal, 6).adapter, 1e-5);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let mut bb = ToyBackbone::new(ToyConfig {
            resolution: 32,
            attn_size: 4,
            ..ToyConfig::default()
        })
        .unwrap();
        assert!(TrainSetup::new(&mut bb, synthetic_pair(16, 1, 0), short()).is_err());
    }

    #[test]
    fn schedule_shorter_than_training_is_rejected() {
        let s = TrainSettings {
            schedule: DegradationSchedule::dynamic(5),
            ..short()
        };
        assert!(s.validate().is_err());
    }
}
