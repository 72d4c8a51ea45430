//! Metric scorer and segmenter plug-ins.
//!
//! Plug-ins are selected by spec strings:
//!
//! | spec | behaviour |
//! |------|-----------|
//! | `constant:<v>` | always `v` |
//! | `prompt_index` | prompt index / 100 |
//! | `command:<program> [args..]` | external program, one score per image pair on stdout |
//! | `rects:<x0>,<y0>,<x1>,<y1>/<x0>,<y0>,<x1>,<y1>` | segmenter with fixed fractional rectangles (concept/component; `-` for none) |
//! | `command:<program> [args..]` | segmenter program writing two mask PNGs |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::config::EvalSection;
use crate::dataset::{self, planes_to_rgb};
use crate::error::{Error, Result};
use crate::grid::{Mask, Planes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ClipT,
    ClipI,
    Dino,
    Dreamsim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::ClipT, Metric::ClipI, Metric::Dino, Metric::Dreamsim];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ClipT => "clip_t",
            Metric::ClipI => "clip_i",
            Metric::Dino => "dino",
            Metric::Dreamsim => "dreamsim",
        }
    }

    pub fn config_key(self) -> &'static str {
        match self {
            Metric::ClipT => "eval.scorer_clip_t",
            Metric::ClipI => "eval.scorer_clip_i",
            Metric::Dino => "eval.scorer_dino",
            Metric::Dreamsim => "eval.scorer_dreamsim",
        }
    }

    /// Text alignment scores the image against text; the rest compare crops.
    pub fn is_fidelity(self) -> bool {
        self != Metric::ClipT
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Dreamsim
    }

    /// Value range of the underlying similarity (cosine) or distance.
    pub fn natural_range(self) -> (f64, f64) {
        match self {
            Metric::Dreamsim => (0.0, 2.0),
            _ => (-1.0, 1.0),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What one scorer call sees for one generated image.
#[derive(Debug, Clone, Copy)]
pub enum ScoreInput<'a> {
    Text {
        image: &'a Planes,
        text: &'a str,
    },
    /// Crops of the generated image and of every reference, already resized
    /// to the scorer's input size.
    Fidelity {
        concept: &'a Planes,
        component: &'a Planes,
        concept_refs: &'a [Planes],
        component_refs: &'a [Planes],
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub metric: Metric,
    pub prompt_index: usize,
    pub seed: u64,
    pub input: ScoreInput<'a>,
}

pub trait Scorer: Send + Sync {
    fn id(&self) -> String;
    fn version(&self) -> String {
        "1".into()
    }
    /// Inclusive range every returned score must lie in.
    fn range(&self) -> (f64, f64);
    /// Side of the square crops handed to [`Scorer::score`].
    fn input_size(&self) -> usize;
    fn score(&self, request: &ScoreRequest<'_>) -> Result<f64>;
}

/// Mean of the concept-vs-reference and component-vs-reference means.
pub fn fidelity_mean(input: &ScoreInput<'_>, mut pairwise: impl FnMut(&Planes, &Planes) -> Result<f64>) -> Result<f64> {
    let ScoreInput::Fidelity {
        concept,
        component,
        concept_refs,
        component_refs,
    } = input
    else {
        return Err(Error::Scorer("fidelity scorer received a text request".into()));
    };
    let mut side = |crop: &Planes, refs: &[Planes]| -> Result<f64> {
        if refs.is_empty() {
            return Err(Error::Scorer("no reference crops".into()));
        }
        let mut sum = 0.0;
        for r in refs {
            sum += pairwise(crop, r)?;
        }
        Ok(sum / refs.len() as f64)
    };
    let a = side(concept, concept_refs)?;
    let b = side(component, component_refs)?;
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn id(&self) -> String {
        format!("constant:{}", self.0)
    }
    fn range(&self) -> (f64, f64) {
        (self.0.min(0.0), self.0.max(1.0))
    }
    fn input_size(&self) -> usize {
        32
    }
    fn score(&self, _: &ScoreRequest<'_>) -> Result<f64> {
        Ok(self.0)
    }
}

/// Scores every image with its prompt index / 100.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptIndexScorer;

impl Scorer for PromptIndexScorer {
    fn id(&self) -> String {
        "prompt_index".into()
    }
    fn range(&self) -> (f64, f64) {
        (0.0, f64::MAX)
    }
    fn input_size(&self) -> usize {
        32
    }
    fn score(&self, r: &ScoreRequest<'_>) -> Result<f64> {
        Ok(r.prompt_index as f64 / 100.0)
    }
}

/// Runs `program args.. <metric> <image.png> <text>` for text alignment and
/// `program args.. <metric> <a.png> <b.png>` for each crop/reference pair,
/// reading one number from stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandScorer {
    pub metric: Metric,
    pub program: String,
    pub args: Vec<String>,
}

pub const COMMAND_INPUT_SIZE: usize = 224;

fn write_planes(p: &Planes, path: &Path) -> Result<()> {
    dataset::save_png(&image::DynamicImage::ImageRgb8(planes_to_rgb(p)), path)
}

fn run_program(program: &str, args: &[String]) -> Result<String> {
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| Error::Scorer(format!("cannot run `{program}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::Scorer(format!(
            "`{program}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

impl CommandScorer {
    fn call(&self, tail: Vec<String>) -> Result<f64> {
        let mut args = self.args.clone();
        args.push(self.metric.as_str().into());
        args.extend(tail);
        let text = run_program(&self.program, &args)?;
        text.trim()
            .parse()
            .map_err(|_| Error::Scorer(format!("`{}` printed `{}`, not a number", self.program, text.trim())))
    }
}

impl Scorer for CommandScorer {
    fn id(&self) -> String {
        format!("command:{} {}", self.program, self.args.join(" ")).trim_end().to_string()
    }
    fn range(&self) -> (f64, f64) {
        self.metric.natural_range()
    }
    fn input_size(&self) -> usize {
        COMMAND_INPUT_SIZE
    }
    fn score(&self, r: &ScoreRequest<'_>) -> Result<f64> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        match r.input {
            ScoreInput::Text { image, text } => {
                let path = dir.path().join("image.png");
                write_planes(image, &path)?;
                self.call(vec![path.display().to_string(), text.to_string()])
            }
            input => {
                let mut n = 0;
                fidelity_mean(&input, |a, b| {
                    n += 1;
                    let (pa, pb) = (dir.path().join(format!("a{n}.png")), dir.path().join(format!("b{n}.png")));
                    write_planes(a, &pa)?;
                    write_planes(b, &pb)?;
                    self.call(vec![pa.display().to_string(), pb.display().to_string()])
                })
            }
        }
    }
}

fn split_command(rest: &str, key: &str) -> Result<(String, Vec<String>)> {
    let mut parts = rest.split_whitespace().map(str::to_string);
    let program = parts
        .next()
        .ok_or_else(|| Error::config(key, "command plug-in needs a program"))?;
    Ok((program, parts.collect()))
}

pub fn parse_scorer(metric: Metric, spec: &str) -> Result<Box<dyn Scorer>> {
    let key = metric.config_key();
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "constant" => {
            let v: f64 = rest
                .parse()
                .map_err(|_| Error::config(key, format!("`{spec}`: constant needs a number")))?;
            if !v.is_finite() {
                return Err(Error::config(key, "constant must be finite"));
            }
            Ok(Box::new(ConstantScorer(v)))
        }
        "prompt_index" if rest.is_empty() => Ok(Box::new(PromptIndexScorer)),
        "command" => {
            let (program, args) = split_command(rest, key)?;
            Ok(Box::new(CommandScorer { metric, program, args }))
        }
        _ => Err(Error::config(
            key,
            format!("unknown scorer `{spec}` (expected constant:<v>, prompt_index or command:<program>)"),
        )),
    }
}

/// One scorer per metric.
#[derive(Default)]
pub struct ScorerSet {
    scorers: BTreeMap<Metric, Box<dyn Scorer>>,
}

impl fmt::Debug for ScorerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.scorers.iter().map(|(m, s)| (m, s.id()))).finish()
    }
}

impl ScorerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, metric: Metric, scorer: Box<dyn Scorer>) {
        self.scorers.insert(metric, scorer);
    }

    pub fn with(mut self, metric: Metric, scorer: impl Scorer + 'static) -> Self {
        self.insert(metric, Box::new(scorer));
        self
    }

    pub fn get(&self, metric: Metric) -> Option<&dyn Scorer> {
        self.scorers.get(&metric).map(|b| b.as_ref())
    }

    /// Builds the set from `eval.scorer_*`; unset keys are left out.
    pub fn from_config(eval: &EvalSection) -> Result<Self> {
        let mut set = ScorerSet::new();
        for (m, spec) in [
            (Metric::ClipT, &eval.scorer_clip_t),
            (Metric::ClipI, &eval.scorer_clip_i),
            (Metric::Dino, &eval.scorer_dino),
            (Metric::Dreamsim, &eval.scorer_dreamsim),
        ] {
            if let Some(spec) = spec {
                set.insert(m, parse_scorer(m, spec)?);
            }
        }
        Ok(set)
    }

    /// Fails unless every metric has a scorer.
    pub fn require_all(&self) -> Result<()> {
        let missing: Vec<&str> = Metric::ALL
            .iter()
            .filter(|m| !self.scorers.contains_key(m))
            .map(|m| m.config_key())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::Scorer(format!(
            "no scorer registered for {}; set e.g. `--{} constant:0.5` or `command:<program>`",
            missing.join(", "),
            missing[0]
        )))
    }
}

/// Regions of the concept and of the component in an image.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> String;
    fn segment(&self, image: &Planes, concept_label: &str, component_label: &str) -> Result<(Mask, Mask)>;
}

/// Fixed rectangles in fractional `[x0, y0, x1, y1]` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RectSegmenter {
    pub concept: Option<[f64; 4]>,
    pub component: Option<[f64; 4]>,
}

fn rect_mask(h: usize, w: usize, r: Option<[f64; 4]>) -> Mask {
    let Some([x0, y0, x1, y1]) = r else {
        return Mask::zeros((h, w));
    };
    Mask::from_shape_fn((h, w), |(y, x)| {
        let (fx, fy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        u8::from(fx >= x0 && fx < x1 && fy >= y0 && fy < y1)
    })
}

impl Segmenter for RectSegmenter {
    fn id(&self) -> String {
        let fmt = |r: Option<[f64; 4]>| match r {
            Some(r) => r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => "-".into(),
        };
        format!("rects:{}/{}", fmt(self.concept), fmt(self.component))
    }
    fn segment(&self, image: &Planes, _: &str, _: &str) -> Result<(Mask, Mask)> {
        let (_, h, w) = image.dim();
        Ok((rect_mask(h, w, self.concept), rect_mask(h, w, self.component)))
    }
}

/// Runs `program args.. <image.png> <concept label> <component label> <concept_out.png> <component_out.png>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandSegmenter {
    pub program: String,
    pub args: Vec<String>,
}

impl Segmenter for CommandSegmenter {
    fn id(&self) -> String {
        format!("command:{} {}", self.program, self.args.join(" ")).trim_end().to_string()
    }
    fn segment(&self, image: &Planes, concept_label: &str, component_label: &str) -> Result<(Mask, Mask)> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("image.png");
        let (a, b) = (dir.path().join("concept.png"), dir.path().join("component.png"));
        write_planes(image, &input)?;
        let mut args = self.args.clone();
        args.extend([
            input.display().to_string(),
            concept_label.to_string(),
            component_label.to_string(),
            a.display().to_string(),
            b.display().to_string(),
        ]);
        run_program(&self.program, &args)?;
        let (_, h, w) = image.dim();
        let read = |p: &Path| -> Result<Mask> {
            let img = image::open(p)
                .map_err(|e| Error::Scorer(format!("segmenter output {}: {e}", p.display())))?
                .to_luma8();
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::Scorer(format!("segmenter output {} has the wrong size", p.display())));
            }
            Ok(Mask::from_shape_fn((h, w), |(y, x)| u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)))
        };
        Ok((read(&a)?, read(&b)?))
    }
}

fn parse_rect(s: &str) -> Result<Option<[f64; 4]>> {
    let s = s.trim();
    if s == "-" || s.is_empty() {
        return Ok(None);
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("eval.segmenter", format!("`{s}` is not four numbers")))?;
    match v[..] {
        [x0, y0, x1, y1] if (0.0..=1.0).contains(&x0) && x0 <= x1 && x1 <= 1.0 && (0.0..=1.0).contains(&y0) && y0 <= y1 && y1 <= 1.0 => {
            Ok(Some([x0, y0, x1, y1]))
        }
        _ => Err(Error::config("eval.segmenter", format!("`{s}` must be x0,y0,x1,y1 within [0, 1]"))),
    }
}

pub fn parse_segmenter(spec: &str) -> Result<Box<dyn Segmenter>> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "rects" => {
            let (a, b) = rest.split_once('/').unwrap_or((rest, "-"));
            Ok(Box::new(RectSegmenter {
                concept: parse_rect(a)?,
                component: parse_rect(b)?,
            }))
        }
        "command" => {
            let (program, args) = split_command(rest, "eval.segmenter")?;
            Ok(Box::new(CommandSegmenter { program, args }))
        }
        _ => Err(Error::config(
            "eval.segmenter",
            format!("unknown segmenter `{spec}` (expected rects:<concept>/<component> or command:<program>)"),
        )),
    }
}
