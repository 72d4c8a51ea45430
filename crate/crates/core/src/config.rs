//! Run configuration: built-in defaults, YAML files, and dotted overrides.
//!
//! Precedence is override > file > default. The resolved configuration is
//! materialized once and hashed; the hash covers every section except
//! `output`, plus a digest of the pair contents.
//!
//! A config file may define the pair inline (top-level `pair_id`,
//! `resolution`, `samples`) or point to a pair file with `data.pair`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::batch::{TimestepRange, DEFAULT_PROMPT_TEMPLATE};
use crate::dataset::{PairFile, PairSpec};
use crate::degradation::{DegradationMode, DegradationSchedule, DEFAULT_ALPHA_INIT, DEFAULT_GAMMA};
use crate::dual_stream::{ObjectiveSettings, TeacherMode, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::losses::{AttnScope, LossWeights, Reduction, DEFAULT_LAMBDA_ATTN, DEFAULT_LAMBDA_PRES};
use crate::optim::AdamWConfig;
use crate::trainer::{self, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Toy,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Float16,
    Float32,
    Float64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub pair: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub model_id: String,
    pub precision: Option<Precision>,
    pub resolution: Option<usize>,
    pub attn_size: usize,
    pub num_timesteps: usize,
    pub init_seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSection {
    pub mode: DegradationMode,
    pub alpha_init: f64,
    pub gamma: f64,
    pub fixed_alpha: f64,
    pub total_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda_attn: f64,
    pub lambda_pres: f64,
    pub mask_reduction: Reduction,
    pub attn_scope: AttnScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSection {
    pub steps: usize,
    pub lr: f64,
    pub embedding_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsbalSection {
    pub steps: usize,
    pub lr: f64,
    pub embedding_lr: Option<f64>,
    pub beta: f64,
    pub teacher: TeacherMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub lr_batch_scaling: bool,
    pub prompt_template: String,
    pub timestep_min: usize,
    pub timestep_max: Option<usize>,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dump_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub prompts: Option<PathBuf>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub images_per_prompt: usize,
    pub seed_start: u64,
    pub jobs: Option<usize>,
    pub segmenter: Option<String>,
    pub scorer_clip_t: Option<String>,
    pub scorer_clip_i: Option<String>,
    pub scorer_dino: Option<String>,
    pub scorer_dreamsim: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub degradation: DegradationSection,
    pub loss: LossSection,
    pub warmup: WarmupSection,
    pub dsbal: DsbalSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        RunConfig {
            data: DataSection { pair: None },
            backbone: BackboneSection {
                kind: BackboneKind::Real,
                model_id: "stabilityai/stable-diffusion-2-1-base".into(),
                precision: None,
                resolution: None,
                attn_size: 16,
                num_timesteps: 1000,
                init_seed: 0,
                lora_rank: 32,
                lora_alpha: 32.0,
            },
            degradation: DegradationSection {
                mode: DegradationMode::Dynamic,
                alpha_init: DEFAULT_ALPHA_INIT,
                gamma: DEFAULT_GAMMA,
                fixed_alpha: 0.4,
                total_steps: None,
            },
            loss: LossSection {
                lambda_attn: DEFAULT_LAMBDA_ATTN,
                lambda_pres: DEFAULT_LAMBDA_PRES,
                mask_reduction: Reduction::FullGrid,
                attn_scope: AttnScope::All,
            },
            warmup: WarmupSection {
                steps: trainer::DEFAULT_WARMUP_STEPS,
                lr: trainer::DEFAULT_WARMUP_LR,
                embedding_lr: None,
            },
            dsbal: DsbalSection {
                steps: trainer::DEFAULT_DSBAL_STEPS,
                lr: trainer::DEFAULT_DSBAL_LR,
                embedding_lr: None,
                beta: DEFAULT_BETA,
                teacher: TeacherMode::Ema,
            },
            train: TrainSection {
                seed: 0,
                lr_batch_scaling: true,
                prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
                timestep_min: 0,
                timestep_max: None,
                weight_decay: opt.weight_decay,
                adam_beta1: opt.beta1,
                adam_beta2: opt.beta2,
                adam_eps: opt.eps,
                dump_degraded: false,
            },
            eval: EvalSection {
                prompts: None,
                steps: 50,
                guidance_scale: 7.5,
                images_per_prompt: 32,
                seed_start: 0,
                jobs: None,
                segmenter: None,
                scorer_clip_t: None,
                scorer_clip_i: None,
                scorer_dino: None,
                scorer_dreamsim: None,
            },
            output: OutputSection {
                dir: PathBuf::from("runs"),
                name: None,
            },
        }
    }
}

/// Value type of a configuration key, used to parse command-line overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Bool,
    Int,
    Float,
    Str,
    Enum(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub nullable: bool,
    pub help: &'static str,
}

const fn key(key: &'static str, kind: Kind, nullable: bool, help: &'static str) -> KeySpec {
    KeySpec { key, kind, nullable, help }
}

const MODES: &[&str] = &["dynamic", "fixed", "linear_ascent", "linear_descent", "off", "mask_out"];

/// Every configuration key.
pub const SCHEMA: &[KeySpec] = &[
    key("data.pair", Kind::Str, true, "pair file (when the config does not define the pair inline)"),
    key("backbone.kind", Kind::Enum(&["toy", "real"]), false, "diffusion backbone"),
    key("backbone.model_id", Kind::Str, false, "model identifier passed to the real backend"),
    key("backbone.precision", Kind::Enum(&["float16", "float32", "float64"]), true, "tensor precision (default float16 real, float64 toy)"),
    key("backbone.resolution", Kind::Int, true, "toy backbone resolution (default: the pair's)"),
    key("backbone.attn_size", Kind::Int, false, "cross-attention map side"),
    key("backbone.num_timesteps", Kind::Int, false, "toy diffusion timesteps T"),
    key("backbone.init_seed", Kind::Int, false, "toy base weight seed"),
    key("backbone.lora_rank", Kind::Int, false, "low-rank adapter rank"),
    key("backbone.lora_alpha", Kind::Float, false, "low-rank adapter scaling alpha"),
    key("degradation.mode", Kind::Enum(MODES), false, "degradation intensity schedule"),
    key("degradation.alpha_init", Kind::Float, false, "initial intensity"),
    key("degradation.gamma", Kind::Float, false, "dynamic schedule exponent"),
    key("degradation.fixed_alpha", Kind::Float, false, "intensity of the fixed mode"),
    key("degradation.total_steps", Kind::Int, true, "schedule length D (default: index of the last step)"),
    key("loss.lambda_attn", Kind::Float, false, "attention loss weight"),
    key("loss.lambda_pres", Kind::Float, false, "preserving loss weight"),
    key("loss.mask_reduction", Kind::Enum(&["full_grid", "mask_area"]), false, "masked loss denominator"),
    key("loss.attn_scope", Kind::Enum(&["all", "max_only"]), false, "samples covered by the attention loss while balancing"),
    key("warmup.steps", Kind::Int, false, "warm-up steps (0 skips the stage)"),
    key("warmup.lr", Kind::Float, false, "warm-up adapter learning rate"),
    key("warmup.embedding_lr", Kind::Float, true, "warm-up pseudo-word learning rate (default: warmup.lr)"),
    key("dsbal.steps", Kind::Int, false, "balancing steps"),
    key("dsbal.lr", Kind::Float, false, "balancing adapter learning rate"),
    key("dsbal.embedding_lr", Kind::Float, true, "balancing pseudo-word learning rate (default: dsbal.lr)"),
    key("dsbal.beta", Kind::Float, false, "EMA smoothing coefficient of the teacher"),
    key("dsbal.teacher", Kind::Enum(&["ema", "frozen_warmup", "previous_step"]), false, "teacher update rule"),
    key("train.seed", Kind::Int, false, "global seed"),
    key("train.lr_batch_scaling", Kind::Bool, false, "multiply learning rates by images per step"),
    key("train.prompt_template", Kind::Str, false, "training prompt, `{}` is the pseudo-word"),
    key("train.timestep_min", Kind::Int, false, "lowest sampled timestep"),
    key("train.timestep_max", Kind::Int, true, "timestep upper bound, exclusive (default T)"),
    key("train.weight_decay", Kind::Float, false, "AdamW weight decay"),
    key("train.adam_beta1", Kind::Float, false, "AdamW beta1"),
    key("train.adam_beta2", Kind::Float, false, "AdamW beta2"),
    key("train.adam_eps", Kind::Float, false, "AdamW epsilon"),
    key("train.dump_degraded", Kind::Bool, false, "write degraded references per step"),
    key("eval.prompts", Kind::Str, true, "prompt suite file (default: bundled suite)"),
    key("eval.steps", Kind::Int, false, "sampler steps"),
    key("eval.guidance_scale", Kind::Float, false, "classifier-free guidance scale"),
    key("eval.images_per_prompt", Kind::Int, false, "images per prompt"),
    key("eval.seed_start", Kind::Int, false, "first generation seed"),
    key("eval.jobs", Kind::Int, true, "generation threads (default: all cores)"),
    key("eval.segmenter", Kind::Str, true, "segmenter plug-in: rects:<concept>/<component> or command:<program>"),
    key("eval.scorer_clip_t", Kind::Str, true, "CLIP-T scorer plug-in"),
    key("eval.scorer_clip_i", Kind::Str, true, "CLIP-I scorer plug-in"),
    key("eval.scorer_dino", Kind::Str, true, "DINO scorer plug-in"),
    key("eval.scorer_dreamsim", Kind::Str, true, "DreamSim scorer plug-in"),
    key("output.dir", Kind::Str, false, "parent directory of run directories"),
    key("output.name", Kind::Str, true, "run directory name (default: pair id and config hash)"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.key == key)
}

/// Parses a command-line value according to the key's kind.
pub fn parse_value(spec: &KeySpec, raw: &str) -> Result<Value> {
    if spec.nullable && matches!(raw, "null" | "none" | "~") {
        return Ok(Value::Null);
    }
    let bad = |what: &str| Error::config(spec.key, format!("`{raw}` is not {what}"));
    Ok(match spec.kind {
        Kind::Bool => Value::Bool(match raw {
            "true" | "on" | "yes" | "1" => true,
            "false" | "off" | "no" | "0" => false,
            _ => return Err(bad("a boolean")),
        }),
        Kind::Int => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Kind::Float => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Kind::Str => Value::String(raw.to_string()),
        Kind::Enum(options) => {
            if !options.contains(&raw) {
                return Err(bad(&format!("one of {}", options.join(", "))));
            }
            Value::String(raw.to_string())
        }
    })
}

const PAIR_KEYS: [&str; 3] = ["pair_id", "resolution", "samples"];

/// Raw contents of a config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub sections: Map<String, Value>,
    pub inline_pair: Option<PairFile>,
    pub base_dir: PathBuf,
}

pub fn read_config_file(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let yaml: serde_yaml::Value = serde_yaml::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), format!("invalid YAML: {e}")))?;
    let json = serde_json::to_value(yaml)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    let mut map = match json {
        Value::Object(m) => m,
        Value::Null => Map::new(),
        _ => return Err(Error::config(path.display().to_string(), "top level must be a mapping")),
    };
    let mut pair_map = Map::new();
    for k in PAIR_KEYS {
        if let Some(v) = map.remove(k) {
            pair_map.insert(k.to_string(), v);
        }
    }
    let inline_pair = if pair_map.is_empty() {
        None
    } else {
        Some(
            serde_json::from_value(Value::Object(pair_map))
                .map_err(|e| Error::config("samples", format!("inline pair: {e}")))?,
        )
    };
    Ok(ConfigFile {
        sections: map,
        inline_pair,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn merge(dst: &mut Value, src: &Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &path)?,
                    Some(slot) => {
                        let spec = key_spec(&path).ok_or_else(|| Error::config(&path, "unknown key"))?;
                        *slot = coerce(spec, v)?;
                    }
                    None => return Err(Error::config(&path, "unknown key")),
                }
            }
            Ok(())
        }
        _ => Err(Error::config(prefix, "expected a mapping")),
    }
}

/// YAML scalars are loosely typed; route them through the override parser.
fn coerce(spec: &KeySpec, v: &Value) -> Result<Value> {
    match v {
        Value::Null => {
            if spec.nullable {
                Ok(Value::Null)
            } else {
                Err(Error::config(spec.key, "may not be null"))
            }
        }
        Value::String(s) => parse_value(spec, s),
        Value::Bool(b) => parse_value(spec, &b.to_string()),
        Value::Number(n) => parse_value(spec, &n.to_string()),
        _ => Err(Error::config(spec.key, "expected a scalar")),
    }
}

fn set_key(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::config(key, "unknown key"))?;
        let slot = obj.get_mut(p).ok_or_else(|| Error::config(key, "unknown key"))?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::config(key, "unknown key"))
}

/// Resolves defaults, file sections, and `(key, raw value)` overrides.
pub fn resolve(file: Option<&ConfigFile>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(f) = file {
        merge(&mut value, &Value::Object(f.sections.clone()), "")?;
    }
    for (k, raw) in overrides {
        let spec = key_spec(k).ok_or_else(|| Error::config(k, "unknown key"))?;
        set_key(&mut value, k, parse_value(spec, raw)?)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
    if let Some(f) = file {
        if let Some(p) = &cfg.data.pair {
            if p.is_relative() && !overrides.iter().any(|(k, _)| k == "data.pair") {
                cfg.data.pair = Some(f.base_dir.join(p));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Applies `(key, raw value)` overrides to an already resolved config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(self)?;
        for (k, raw) in overrides {
            let spec = key_spec(k).ok_or_else(|| Error::config(k, "unknown key"))?;
            set_key(&mut value, k, parse_value(spec, raw)?)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} must be positive")))
    }
}

fn unit(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(key, format!("{v} outside [0, 1]")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        unit("degradation.alpha_init", self.degradation.alpha_init)?;
        unit("degradation.fixed_alpha", self.degradation.fixed_alpha)?;
        positive("degradation.gamma", self.degradation.gamma)?;
        for (k, v) in [("loss.lambda_attn", self.loss.lambda_attn), ("loss.lambda_pres", self.loss.lambda_pres)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("{v} must be >= 0")));
            }
        }
        positive("warmup.lr", self.warmup.lr)?;
        positive("dsbal.lr", self.dsbal.lr)?;
        if let Some(v) = self.warmup.embedding_lr {
            positive("warmup.embedding_lr", v)?;
        }
        if let Some(v) = self.dsbal.embedding_lr {
            positive("dsbal.embedding_lr", v)?;
        }
        unit("dsbal.beta", self.dsbal.beta)?;
        if self.dsbal.steps == 0 {
            return Err(Error::config("dsbal.steps", "must be at least 1"));
        }
        if let Some(d) = self.degradation.total_steps {
            let need = self.warmup.steps + self.dsbal.steps - 1;
            if d == 0 || d < need {
                return Err(Error::config(
                    "degradation.total_steps",
                    format!("{d} does not cover the last step index {need}"),
                ));
            }
        }
        if self.backbone.lora_rank == 0 {
            return Err(Error::config("backbone.lora_rank", "must be at least 1"));
        }
        positive("backbone.lora_alpha", self.backbone.lora_alpha)?;
        if self.backbone.kind == BackboneKind::Toy && self.precision() != Precision::Float64 {
            return Err(Error::config("backbone.precision", "the toy backbone computes in float64 only"));
        }
        if let Some(max) = self.train.timestep_max {
            if max <= self.train.timestep_min {
                return Err(Error::config("train.timestep_max", "must exceed train.timestep_min"));
            }
        }
        unit("train.adam_beta1", self.train.adam_beta1)?;
        unit("train.adam_beta2", self.train.adam_beta2)?;
        positive("train.adam_eps", self.train.adam_eps)?;
        if !(self.train.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        crate::batch::training_prompt(&self.train.prompt_template, "<x>")?;
        if self.eval.steps == 0 {
            return Err(Error::config("eval.steps", "must be at least 1"));
        }
        if self.eval.images_per_prompt == 0 {
            return Err(Error::config("eval.images_per_prompt", "must be at least 1"));
        }
        if self.eval.jobs == Some(0) {
            return Err(Error::config("eval.jobs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        self.backbone.precision.unwrap_or(match self.backbone.kind {
            BackboneKind::Real => Precision::Float16,
            BackboneKind::Toy => Precision::Float64,
        })
    }

    pub fn schedule(&self) -> DegradationSchedule {
        DegradationSchedule {
            mode: self.degradation.mode,
            alpha_init: self.degradation.alpha_init,
            gamma: self.degradation.gamma,
            fixed_alpha: self.degradation.fixed_alpha,
            total_steps: self
                .degradation
                .total_steps
                .unwrap_or_else(|| trainer::schedule_length(self.warmup.steps, self.dsbal.steps)),
        }
    }

    pub fn train_settings(&self, run_dir: Option<&Path>) -> TrainSettings {
        let t = &self.train;
        TrainSettings {
            seed: t.seed,
            warmup_steps: self.warmup.steps,
            dsbal_steps: self.dsbal.steps,
            warmup_lr: self.warmup.lr,
            warmup_embedding_lr: self.warmup.embedding_lr,
            dsbal_lr: self.dsbal.lr,
            dsbal_embedding_lr: self.dsbal.embedding_lr,
            lr_batch_scaling: t.lr_batch_scaling,
            objective: ObjectiveSettings {
                weights: LossWeights {
                    lambda_attn: self.loss.lambda_attn,
                    lambda_pres: self.loss.lambda_pres,
                },
                reduction: self.loss.mask_reduction,
                attn_scope: self.loss.attn_scope,
            },
            beta: self.dsbal.beta,
            teacher: self.dsbal.teacher,
            schedule: self.schedule(),
            timesteps: match (t.timestep_min, t.timestep_max) {
                (0, None) => None,
                (min, max) => Some(TimestepRange {
                    min,
                    max: max.unwrap_or(self.backbone.num_timesteps),
                }),
            },
            optimizer: AdamWConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            prompt_template: t.prompt_template.clone(),
            dump_degraded: match (t.dump_degraded, run_dir) {
                (true, Some(dir)) => Some(dir.join("degraded")),
                _ => None,
            },
        }
    }

    /// Flat `key -> value` view, in schema order.
    pub fn flatten(&self) -> Vec<(String, Value)> {
        let v = serde_json::to_value(self).expect("config serializes");
        SCHEMA
            .iter()
            .map(|s| {
                let mut cur = &v;
                for p in s.key.split('.') {
                    cur = &cur[p];
                }
                (s.key.to_string(), cur.clone())
            })
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.flatten().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Hex SHA-256 over every result-affecting field plus the pair contents.
    pub fn hash(&self, pair: &PairSpec) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.flatten() {
            if k.starts_with("output.") || k == "data.pair" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.to_string().as_bytes());
            h.update(b"\n");
        }
        h.update(pair_digest(pair).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Hex SHA-256 of a pair's labels, pseudo-words, pixels and masks.
pub fn pair_digest(pair: &PairSpec) -> String {
    let mut h = Sha256::new();
    h.update(pair.pair_id.as_bytes());
    h.update(pair.resolution.to_le_bytes());
    for s in &pair.samples {
        h.update(s.index.to_le_bytes());
        h.update(s.category_label.as_bytes());
        h.update([0]);
        h.update(s.pseudo_word.as_bytes());
        h.update([0]);
        for img in &s.images {
            for v in img.pixels.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(img.mask.iter().copied().collect::<Vec<u8>>());
            if let Some(r) = &img.component_region {
                h.update(b"region");
                h.update(r.iter().copied().collect::<Vec<u8>>());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
