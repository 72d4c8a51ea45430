//! Seeded DDIM sampling with classifier-free guidance over a prompt suite.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterState, Backbone};
use crate::dataset::{self, PairSpec};
use crate::error::{Error, Result};
use crate::evaluation::prompts::{render_prompt, PromptSuite, RenderMode};
use crate::grid::Planes;
use crate::seed::{self, Stream};

pub const SAMPLER: &str = "ddim_eta0";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub steps: usize,
    pub guidance_scale: f64,
    pub images_per_prompt: usize,
    pub seed_start: u64,
}

impl Default for GenSettings {
    fn default() -> Self {
        GenSettings {
            steps: 50,
            guidance_scale: 7.5,
            images_per_prompt: 32,
            seed_start: 0,
        }
    }
}

impl GenSettings {
    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.seed_start..self.seed_start + self.images_per_prompt as u64
    }

    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > num_timesteps {
            return Err(Error::config("eval.steps", format!("{} outside [1, {num_timesteps}]", self.steps)));
        }
        if self.images_per_prompt == 0 {
            return Err(Error::config("eval.images_per_prompt", "must be at least 1"));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("eval.guidance_scale", "must be finite"));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps, descending: `(steps-1)*T/steps, ..., 0`.
pub fn ddim_timesteps(num_timesteps: usize, steps: usize) -> Vec<usize> {
    (0..steps).rev().map(|i| i * num_timesteps / steps).collect()
}

/// Draws one image. The initial latent depends only on `seed`.
pub fn sample_image<B: Backbone + ?Sized>(
    backbone: &B,
    adapter: &AdapterState,
    cond: &[usize],
    uncond: &[usize],
    settings: &GenSettings,
    seed: u64,
) -> Result<Planes> {
    let mut rng = seed::rng(seed, Stream::Generation, &[]);
    let mut z = Planes::from_shape_simple_fn(backbone.latent_dims().shape(), || rng.sample(StandardNormal));
    let ts = ddim_timesteps(backbone.num_timesteps(), settings.steps);
    let g = settings.guidance_scale;
    for (i, &t) in ts.iter().enumerate() {
        let eps_c = backbone.predict_noise(adapter, &z, t, cond)?;
        let eps_u = backbone.predict_noise(adapter, &z, t, uncond)?;
        let eps = &eps_u + &((&eps_c - &eps_u) * g);
        let (a, s) = backbone.noise_coefficients(t)?;
        if a <= 0.0 {
            return Err(Error::Backbone(format!("signal coefficient vanishes at t = {t}")));
        }
        let x0 = (&z - &(&eps * s)) / a;
        let (ap, sp) = match ts.get(i + 1) {
            Some(&next) => backbone.noise_coefficients(next)?,
            None => (1.0, 0.0),
        };
        z = &x0 * ap + &(&eps * sp);
    }
    let mut px = backbone.decode_latent(&z)?;
    px.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(px)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub index: usize,
    pub template: String,
    /// Generation prompt (pseudo-words).
    pub prompt: String,
    /// Text-alignment reference (category labels).
    pub label_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub prompt_index: usize,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub pair_id: String,
    pub backbone: String,
    pub sampler: String,
    pub settings: GenSettings,
    pub suite_checksum: String,
    pub prompts: Vec<PromptRecord>,
    pub images: Vec<ImageRecord>,
}

impl ImageManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Every `(prompt, seed)` unit that is missing, duplicated, or whose file is absent.
    pub fn gaps(&self, base: &Path) -> Vec<String> {
        let mut gaps = Vec::new();
        let mut seen = std::collections::BTreeMap::new();
        for r in &self.images {
            *seen.entry((r.prompt_index, r.seed)).or_insert(0usize) += 1;
            if !base.join(&r.file).is_file() {
                gaps.push(format!("prompt {} seed {}: file {} missing", r.prompt_index, r.seed, r.file.display()));
            }
            if r.prompt_index >= self.prompts.len() || !self.settings.seeds().contains(&r.seed) {
                gaps.push(format!("prompt {} seed {}: not part of the suite", r.prompt_index, r.seed));
            }
        }
        for p in 0..self.prompts.len() {
            for s in self.settings.seeds() {
                match seen.get(&(p, s)) {
                    None => gaps.push(format!("prompt {p} seed {s}: not generated")),
                    Some(&n) if n > 1 => gaps.push(format!("prompt {p} seed {s}: listed {n} times")),
                    _ => {}
                }
            }
        }
        gaps
    }

    pub fn check_complete(&self, base: &Path) -> Result<()> {
        let gaps = self.gaps(base);
        if gaps.is_empty() {
            Ok(())
        } else {
            Err(Error::Evaluation(format!(
                "incomplete image manifest ({} gaps): {}",
                gaps.len(),
                gaps.join("; ")
            )))
        }
    }
}

pub fn image_file(prompt_index: usize, seed: u64) -> PathBuf {
    PathBuf::from("images").join(format!("p{prompt_index:02}_s{seed:04}.png"))
}

pub fn prompt_records(pair: &PairSpec, suite: &PromptSuite) -> Result<Vec<PromptRecord>> {
    suite
        .templates
        .iter()
        .enumerate()
        .map(|(index, t)| {
            Ok(PromptRecord {
                index,
                template: t.clone(),
                prompt: render_prompt(t, pair, RenderMode::Pseudo)?,
                label_prompt: render_prompt(t, pair, RenderMode::Label)?,
            })
        })
        .collect()
}

/// Generates `|suite| x images_per_prompt` PNGs under `out_dir/images` and
/// writes `out_dir/manifest.json`. The pair's pseudo-words must already be
/// registered with the backbone tokenizer.
pub fn generate_eval_images<B: Backbone + ?Sized>(
    backbone: &B,
    adapter: &AdapterState,
    pair: &PairSpec,
    suite: &PromptSuite,
    settings: &GenSettings,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<ImageManifest> {
    settings.validate(backbone.num_timesteps())?;
    let prompts = prompt_records(pair, suite)?;
    let tokens = prompts
        .iter()
        .map(|p| backbone.tokenize(&p.prompt))
        .collect::<Result<Vec<_>>>()?;
    let uncond = backbone.tokenize("")?;
    let units: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| settings.seeds().map(move |s| (p, s)))
        .collect();
    let work = || {
        units
            .par_iter()
            .map(|&(p, s)| {
                let px = sample_image(backbone, adapter, &tokens[p], &uncond, settings, s)?;
                let file = image_file(p, s);
                let img = image::DynamicImage::ImageRgb8(dataset::planes_to_rgb(&px));
                dataset::save_png(&img, &out_dir.join(&file))?;
                Ok(ImageRecord {
                    prompt_index: p,
                    seed: s,
                    file,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let images = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Evaluation(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let manifest = ImageManifest {
        pair_id: pair.pair_id.clone(),
        backbone: backbone.kind().to_string(),
        sampler: SAMPLER.to_string(),
        settings: *settings,
        suite_checksum: suite.checksum(),
        prompts,
        images,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
