//! Evaluation protocol: prompt suite, seeded generation, region-isolated
//! fidelity crops and pluggable metric scorers.

pub mod fidelity;
pub mod generate;
pub mod metrics;
pub mod prompts;
pub mod scorers;

use std::path::Path;

use crate::backbone::{AdapterState, Backbone};
use crate::config::EvalSection;
use crate::dataset::PairSpec;
use crate::error::{Error, Result};

pub use fidelity::{fidelity_preprocess, FidelityCrops};
pub use generate::{generate_eval_images, GenSettings, ImageManifest};
pub use metrics::{aggregate_metrics, MetricReport};
pub use prompts::{render_prompt, PromptSuite, RenderMode};
pub use scorers::{Metric, Scorer, ScorerSet, Segmenter};

pub const METRICS_FILE: &str = "metrics.json";

impl From<&EvalSection> for GenSettings {
    fn from(e: &EvalSection) -> Self {
        GenSettings {
            steps: e.steps,
            guidance_scale: e.guidance_scale,
            images_per_prompt: e.images_per_prompt,
            seed_start: e.seed_start,
        }
    }
}

pub fn suite_from_config(eval: &EvalSection) -> Result<PromptSuite> {
    match &eval.prompts {
        Some(p) => PromptSuite::from_file(p),
        None => Ok(PromptSuite::bundled()),
    }
}

pub fn segmenter_from_config(eval: &EvalSection) -> Result<Box<dyn Segmenter>> {
    let spec = eval.segmenter.as_deref().ok_or_else(|| {
        Error::Scorer("no segmenter configured; set `--eval.segmenter rects:<concept>/<component>` or `command:<program>`".into())
    })?;
    scorers::parse_segmenter(spec)
}

/// Generates the evaluation images into `out_dir`, scores them and writes
/// `metrics.json`. Scorers and segmenter are resolved before any image is drawn.
pub fn evaluate<B: Backbone + ?Sized>(
    backbone: &B,
    adapter: &AdapterState,
    pair: &PairSpec,
    eval: &EvalSection,
    out_dir: &Path,
) -> Result<(ImageManifest, MetricReport)> {
    let scorers = ScorerSet::from_config(eval)?;
    scorers.require_all()?;
    let segmenter = segmenter_from_config(eval)?;
    let suite = suite_from_config(eval)?;
    let manifest = generate_eval_images(backbone, adapter, pair, &suite, &eval.into(), out_dir, eval.jobs)?;
    let report = aggregate_metrics(&manifest, out_dir, pair, &scorers, segmenter.as_ref())?;
    report.save(&out_dir.join(METRICS_FILE))?;
    Ok((manifest, report))
}
