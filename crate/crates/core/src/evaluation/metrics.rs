//! Scores every generated image and reduces the scores to a report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, PairSpec, Role};
use crate::error::{Error, Result};
use crate::evaluation::fidelity::{fidelity_preprocess, tight_crop, CROP_POLICY};
use crate::evaluation::generate::{GenSettings, ImageManifest, ImageRecord};
use crate::evaluation::scorers::{Metric, ScoreInput, ScoreRequest, Scorer, ScorerSet, Segmenter};
use crate::grid::{Mask, Planes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub id: String,
    pub version: String,
    pub range: (f64, f64),
    pub input_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub generation: GenSettings,
    pub sampler: String,
    pub backbone: String,
    pub suite_checksum: String,
    pub crop_policy: String,
    pub segmenter: String,
    pub scorers: BTreeMap<Metric, ScorerInfo>,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompt_index: usize,
    pub template: String,
    pub prompt: String,
    pub label_prompt: String,
    pub images: usize,
    /// Images that entered the fidelity means.
    pub fidelity_images: usize,
    pub means: BTreeMap<Metric, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedImage {
    pub prompt_index: usize,
    pub seed: u64,
    pub file: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pair_id: String,
    pub settings: ReportSettings,
    /// `None` when no image could be scored for the metric.
    pub per_metric_means: BTreeMap<Metric, Option<f64>>,
    pub per_prompt: Vec<PromptMetrics>,
    pub excluded_images: Vec<ExcludedImage>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Reference crops of both samples at one scorer input size.
#[derive(Debug, Clone)]
struct References {
    concept: Vec<Planes>,
    component: Vec<Planes>,
}

fn reference_crops(pair: &PairSpec, size: usize) -> Result<References> {
    let mut refs = References {
        concept: Vec::new(),
        component: Vec::new(),
    };
    for s in &pair.samples {
        for img in &s.images {
            let none = Mask::zeros(img.mask.dim());
            let exclusion = match s.role {
                Role::Concept => dataset::component_region_for(pair, img).unwrap_or(&none),
                Role::Component => &none,
            };
            let crops = fidelity_preprocess(&img.pixels, &img.mask, exclusion)?;
            let crop = tight_crop(&crops.concept, &crops.concept_region, size)?.ok_or_else(|| {
                Error::Evaluation(format!("reference {} has an empty region", img.entry.image.display()))
            })?;
            match s.role {
                Role::Concept => refs.concept.push(crop),
                Role::Component => refs.component.push(crop),
            }
        }
    }
    Ok(refs)
}

struct ImageScores {
    scores: BTreeMap<Metric, f64>,
    excluded: Option<String>,
}

fn check_range(scorer: &dyn Scorer, metric: Metric, v: f64) -> Result<f64> {
    let (lo, hi) = scorer.range();
    if !v.is_finite() || v < lo || v > hi {
        return Err(Error::Scorer(format!(
            "{} returned {v} for {metric}, outside its declared range [{lo}, {hi}]",
            scorer.id()
        )));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn score_image(
    record: &ImageRecord,
    label_prompt: &str,
    base: &Path,
    pair: &PairSpec,
    scorers: &ScorerSet,
    segmenter: &dyn Segmenter,
    refs: &BTreeMap<usize, References>,
) -> Result<ImageScores> {
    let path = base.join(&record.file);
    let rgb = image::open(&path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_rgb8();
    let image = dataset::rgb_to_planes(&rgb);
    let mut scores = BTreeMap::new();
    let clip_t = scorers.get(Metric::ClipT).expect("checked");
    let v = clip_t.score(&ScoreRequest {
        metric: Metric::ClipT,
        prompt_index: record.prompt_index,
        seed: record.seed,
        input: ScoreInput::Text {
            image: &image,
            text: label_prompt,
        },
    })?;
    scores.insert(Metric::ClipT, check_range(clip_t, Metric::ClipT, v)?);

    let (concept, component) =
        segmenter.segment(&image, &pair.concept().category_label, &pair.component().category_label)?;
    let crops = fidelity_preprocess(&image, &concept, &component)?;
    let excluded = if crops.concept_empty() {
        Some("empty concept region".to_string())
    } else if crops.component_empty() {
        Some("empty component region".to_string())
    } else {
        None
    };
    if excluded.is_none() {
        for m in Metric::ALL.into_iter().filter(|m| m.is_fidelity()) {
            let scorer = scorers.get(m).expect("checked");
            let size = scorer.input_size();
            let c = tight_crop(&crops.concept, &crops.concept_region, size)?.expect("non-empty");
            let p = tight_crop(&crops.component, &crops.component_region, size)?.expect("non-empty");
            let r = &refs[&size];
            let v = scorer.score(&ScoreRequest {
                metric: m,
                prompt_index: record.prompt_index,
                seed: record.seed,
                input: ScoreInput::Fidelity {
                    concept: &c,
                    component: &p,
                    concept_refs: &r.concept,
                    component_refs: &r.component,
                },
            })?;
            scores.insert(m, check_range(scorer, m, v)?);
        }
    }
    Ok(ImageScores { scores, excluded })
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn mean(self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Scores a complete manifest located in `base`.
///
/// CLIP-T compares each image with its label-mode prompt; the fidelity
/// metrics compare segmented crops with the pair's reference crops. Images
/// whose concept or component region is empty are left out of the fidelity
/// means and listed in `excluded_images`. The result does not depend on the
/// order of the manifest entries.
pub fn aggregate_metrics(
    manifest: &ImageManifest,
    base: &Path,
    pair: &PairSpec,
    scorers: &ScorerSet,
    segmenter: &dyn Segmenter,
) -> Result<MetricReport> {
    scorers.require_all()?;
    manifest.check_complete(base)?;
    if manifest.pair_id != pair.pair_id {
        return Err(Error::Evaluation(format!(
            "manifest is for pair `{}`, not `{}`",
            manifest.pair_id, pair.pair_id
        )));
    }
    let mut refs = BTreeMap::new();
    for m in Metric::ALL.into_iter().filter(|m| m.is_fidelity()) {
        let size = scorers.get(m).expect("checked").input_size();
        if let std::collections::btree_map::Entry::Vacant(e) = refs.entry(size) {
            e.insert(reference_crops(pair, size)?);
        }
    }
    let mut records = manifest.images.clone();
    records.sort_by_key(|r| (r.prompt_index, r.seed));
    let results = records
        .par_iter()
        .map(|r| {
            let label = &manifest.prompts[r.prompt_index].label_prompt;
            score_image(r, label, base, pair, scorers, segmenter, &refs)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total: BTreeMap<Metric, Acc> = BTreeMap::new();
    let mut per_prompt: Vec<(BTreeMap<Metric, Acc>, usize, usize)> =
        vec![(BTreeMap::new(), 0, 0); manifest.prompts.len()];
    let mut excluded_images = Vec::new();
    for (r, s) in records.iter().zip(&results) {
        let slot = &mut per_prompt[r.prompt_index];
        slot.1 += 1;
        if s.excluded.is_none() {
            slot.2 += 1;
        }
        for (&m, &v) in &s.scores {
            for acc in [total.entry(m).or_default(), slot.0.entry(m).or_default()] {
                acc.sum += v;
                acc.n += 1;
            }
        }
        if let Some(reason) = &s.excluded {
            excluded_images.push(ExcludedImage {
                prompt_index: r.prompt_index,
                seed: r.seed,
                file: r.file.clone(),
                reason: reason.clone(),
            });
        }
    }
    let means = |accs: &BTreeMap<Metric, Acc>| -> BTreeMap<Metric, Option<f64>> {
        Metric::ALL
            .iter()
            .map(|&m| (m, accs.get(&m).copied().unwrap_or_default().mean()))
            .collect()
    };
    let scorer_info = Metric::ALL
        .iter()
        .map(|&m| {
            let s = scorers.get(m).expect("checked");
            (
                m,
                ScorerInfo {
                    id: s.id(),
                    version: s.version(),
                    range: s.range(),
                    input_size: s.input_size(),
                },
            )
        })
        .collect();
    Ok(MetricReport {
        pair_id: pair.pair_id.clone(),
        settings: ReportSettings {
            generation: manifest.settings,
            sampler: manifest.sampler.clone(),
            backbone: manifest.backbone.clone(),
            suite_checksum: manifest.suite_checksum.clone(),
            crop_policy: CROP_POLICY.to_string(),
            segmenter: segmenter.id(),
            scorers: scorer_info,
            image_count: records.len(),
        },
        per_metric_means: means(&total),
        per_prompt: manifest
            .prompts
            .iter()
            .zip(&per_prompt)
            .map(|(p, (accs, images, fid))| PromptMetrics {
                prompt_index: p.index,
                template: p.template.clone(),
                prompt: p.prompt.clone(),
                label_prompt: p.label_prompt.clone(),
                images: *images,
                fidelity_images: *fid,
                means: means(accs),
            })
            .collect(),
        excluded_images,
    })
}
