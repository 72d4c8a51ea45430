//! Ablation harness: named config variants trained with a shared seed and
//! reduced to one comparison table.
//!
//! A grid file lists presets and/or explicit variants:
//!
//! ```yaml
//! presets: [degradation]       # degradation | teacher | warmup
//! evaluate: false
//! variants:
//!   - name: fixed_0.4
//!     label: fixed alpha=0.4
//!     set:
//!       degradation.mode: fixed
//!       degradation.fixed_alpha: 0.4
//! ```
//!
//! Every `set` key is a run config key. Variants that resolve to the same
//! config hash share one run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigFile, RunConfig};
use crate::degradation::DegradationMode;
use crate::dataset::PairSpec;
use crate::dual_stream::TeacherMode;
use crate::error::{Error, Result};
use crate::evaluation::{self, Metric};
use crate::run::{self, RunManifest};

pub const TABLE_CSV: &str = "ablation.csv";
pub const TABLE_JSON: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Intensity schedules: mask-out, fixed, linear and dynamic.
    Degradation,
    /// Teacher update rules for the preserving loss.
    Teacher,
    /// Balancing with and without the warm-up stage.
    Warmup,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Degradation, Preset::Teacher, Preset::Warmup];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Degradation => "degradation",
            Preset::Teacher => "teacher",
            Preset::Warmup => "warmup",
        }
    }

    pub fn variants(self) -> Vec<Variant> {
        let v = |name: &str, label: &str, set: &[(&str, &str)]| Variant {
            group: self.as_str().to_string(),
            name: name.to_string(),
            label: label.to_string(),
            set: set.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        match self {
            Preset::Degradation => {
                let mut out = vec![v("mask_out", "mask-out", &[("degradation.mode", "mask_out")])];
                for a in ["0.4", "0.6", "0.8"] {
                    out.push(v(
                        &format!("fixed_{a}"),
                        &format!("fixed alpha={a}"),
                        &[("degradation.mode", "fixed"), ("degradation.fixed_alpha", a)],
                    ));
                }
                out.push(v("linear_ascent", "linear ascent", &[("degradation.mode", "linear_ascent")]));
                out.push(v("linear_descent", "linear descent", &[("degradation.mode", "linear_descent")]));
                for g in ["8", "16", "32", "64"] {
                    out.push(v(
                        &format!("dynamic_gamma_{g}"),
                        &format!("dynamic gamma={g}"),
                        &[("degradation.mode", "dynamic"), ("degradation.gamma", g)],
                    ));
                }
                out
            }
            Preset::Teacher => {
                let mut out = vec![
                    v("frozen_warmup", "fixed beta=0 (warm-up weights)", &[("dsbal.teacher", "frozen_warmup")]),
                    v("previous_step", "fixed beta=1 (previous step)", &[("dsbal.teacher", "previous_step")]),
                ];
                for b in ["0.5", "0.9", "0.99"] {
                    out.push(v(
                        &format!("ema_{b}"),
                        &format!("momentum beta={b}"),
                        &[("dsbal.teacher", "ema"), ("dsbal.beta", b)],
                    ));
                }
                out
            }
            Preset::Warmup => vec![
                v("with_warmup", "with warm-up", &[]),
                v("without_warmup", "without warm-up", &[("warmup.steps", "0")]),
            ],
        }
    }
}

/// One row of the grid: config overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub group: String,
    pub name: String,
    pub label: String,
    pub set: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantFile {
    name: String,
    label: Option<String>,
    #[serde(default)]
    set: BTreeMap<String, serde_yaml::Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default)]
    presets: Vec<Preset>,
    #[serde(default)]
    evaluate: bool,
    #[serde(default)]
    variants: Vec<VariantFile>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    /// Generate and score images for every run.
    pub evaluate: bool,
}

fn scalar(key: &str, v: &serde_yaml::Value) -> Result<String> {
    Ok(match v {
        serde_yaml::Value::Null => "null".into(),
        serde_yaml::Value::Bool(b) => b.to_string(),
        serde_yaml::Value::Number(n) => n.to_string(),
        serde_yaml::Value::String(s) => s.clone(),
        _ => return Err(Error::config(key, "expected a scalar")),
    })
}

impl GridSpec {
    pub fn from_presets(presets: &[Preset]) -> Self {
        GridSpec {
            variants: presets.iter().flat_map(|p| p.variants()).collect(),
            evaluate: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: GridFile = serde_yaml::from_str(text).map_err(|e| Error::config("grid", e.to_string()))?;
        let mut spec = GridSpec::from_presets(&file.presets);
        spec.evaluate = file.evaluate;
        for v in file.variants {
            let set = v
                .set
                .iter()
                .map(|(k, val)| Ok((k.clone(), scalar(&format!("variants.{}.{k}", v.name), val)?)))
                .collect::<Result<_>>()?;
            spec.variants.push(Variant {
                group: "custom".into(),
                label: v.label.unwrap_or_else(|| v.name.clone()),
                name: v.name,
                set,
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("grid", "no variants (add `presets` or `variants`)"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\']) {
                return Err(Error::config("grid", format!("invalid variant name `{}`", v.name)));
            }
            if !seen.insert(&v.name) {
                return Err(Error::config("grid", format!("duplicate variant `{}`", v.name)));
            }
            for k in v.set.keys() {
                let path = format!("variants.{}.{k}", v.name);
                if config::key_spec(k).is_none() {
                    return Err(Error::config(path, "unknown key"));
                }
                if k == "data.pair" || k.starts_with("output.") {
                    return Err(Error::config(path, "cannot vary per ablation row"));
                }
            }
        }
        Ok(())
    }
}

/// A variant with its resolved configuration.
#[derive(Debug, Clone)]
pub struct PlannedVariant {
    pub variant: Variant,
    pub config: RunConfig,
    pub hash: String,
}

/// Resolves every variant against the base config. Runs go to `out_dir/runs`.
pub fn plan(
    file: Option<&ConfigFile>,
    overrides: &[(String, String)],
    base: &RunConfig,
    pair: &PairSpec,
    grid: &GridSpec,
    out_dir: &Path,
) -> Result<Vec<PlannedVariant>> {
    grid.validate()?;
    grid.variants
        .iter()
        .map(|v| {
            let mut all = overrides.to_vec();
            all.extend(v.set.iter().map(|(k, val)| (k.clone(), val.clone())));
            let mut cfg = config::resolve(file, &all).map_err(|e| Error::Variant {
                variant: v.name.clone(),
                source: Box::new(e),
            })?;
            cfg.data.pair = base.data.pair.clone();
            cfg.output.dir = out_dir.join("runs");
            cfg.output.name = None;
            let hash = cfg.hash(pair);
            Ok(PlannedVariant {
                variant: v.clone(),
                config: cfg,
                hash,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub name: String,
    pub label: String,
    pub set: BTreeMap<String, String>,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub degradation_mode: DegradationMode,
    pub alpha_init: f64,
    pub gamma: f64,
    pub fixed_alpha: f64,
    pub teacher: TeacherMode,
    pub beta: f64,
    pub warmup_steps: usize,
    pub dsbal_steps: usize,
    pub final_total: Option<f64>,
    pub frozen_base_verified: Option<bool>,
    /// Empty unless the grid asked for evaluation.
    pub metrics: BTreeMap<Metric, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub pair_id: String,
    pub seed: u64,
    pub evaluated: bool,
    pub rows: Vec<AblationRow>,
}

struct RunSummary {
    dir: PathBuf,
    manifest: RunManifest,
    metrics: BTreeMap<Metric, Option<f64>>,
}

fn run_one(p: &PlannedVariant, pair: &PairSpec, evaluate: bool) -> Result<RunSummary> {
    let mut backbone = run::build_backbone(&p.config, pair)?;
    let res = run::train_run(&p.config, pair.clone(), &mut backbone, None)?;
    let mut metrics = BTreeMap::new();
    if evaluate {
        let (_, report) =
            evaluation::evaluate(&backbone, &res.outcome.online, pair, &p.config.eval, &res.dir.join("eval"))?;
        metrics = report.per_metric_means;
    }
    Ok(RunSummary {
        dir: res.dir,
        manifest: res.manifest,
        metrics,
    })
}

/// Trains each distinct configuration once. With `jobs`, runs execute on a
/// pool of that many threads; results do not depend on the pool size.
pub fn run_ablation(
    planned: &[PlannedVariant],
    pair: &PairSpec,
    evaluate: bool,
    jobs: Option<usize>,
) -> Result<AblationTable> {
    let mut unique: Vec<&PlannedVariant> = Vec::new();
    for p in planned {
        if !unique.iter().any(|u| u.hash == p.hash) {
            unique.push(p);
        }
    }
    let work = || {
        unique
            .par_iter()
            .map(|p| {
                log::info!("ablation: training `{}`", p.variant.name);
                run_one(p, pair, evaluate)
                    .map(|s| (p.hash.clone(), s))
                    .map_err(|e| Error::Variant {
                        variant: p.variant.name.clone(),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<BTreeMap<_, _>>>()
    };
    let runs = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let rows = planned
        .iter()
        .map(|p| {
            let s = &runs[&p.hash];
            let c = &s.manifest.config;
            AblationRow {
                group: p.variant.group.clone(),
                name: p.variant.name.clone(),
                label: p.variant.label.clone(),
                set: p.variant.set.clone(),
                config_hash: p.hash.clone(),
                run_dir: s.dir.clone(),
                degradation_mode: c.degradation.mode,
                alpha_init: c.degradation.alpha_init,
                gamma: c.degradation.gamma,
                fixed_alpha: c.degradation.fixed_alpha,
                teacher: c.dsbal.teacher,
                beta: c.dsbal.beta,
                warmup_steps: c.warmup.steps,
                dsbal_steps: c.dsbal.steps,
                final_total: s.manifest.stages.last().and_then(|st| st.final_total),
                frozen_base_verified: s.manifest.frozen_base_verified,
                metrics: s.metrics.clone(),
            }
        })
        .collect();
    Ok(AblationTable {
        pair_id: pair.pair_id.clone(),
        seed: planned.first().map_or(0, |p| p.config.train.seed),
        evaluated: evaluate,
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationTable {
    pub const CSV_HEADER: [&'static str; 18] = [
        "group",
        "name",
        "label",
        "config_hash",
        "run_dir",
        "degradation_mode",
        "alpha_init",
        "gamma",
        "fixed_alpha",
        "teacher",
        "beta",
        "warmup_steps",
        "dsbal_steps",
        "final_total",
        "clip_t",
        "clip_i",
        "dino",
        "dreamsim",
    ];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::io("ablation.csv", e.into());
        w.write_record(Self::CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.group.clone(),
                r.name.clone(),
                r.label.clone(),
                r.config_hash.clone(),
                r.run_dir.display().to_string(),
                r.degradation_mode.to_string(),
                r.alpha_init.to_string(),
                r.gamma.to_string(),
                r.fixed_alpha.to_string(),
                r.teacher.to_string(),
                r.beta.to_string(),
                r.warmup_steps.to_string(),
                r.dsbal_steps.to_string(),
                cell(r.final_total),
            ];
            rec.extend(Metric::ALL.iter().map(|m| cell(r.metrics.get(m).copied().flatten())));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("ablation.csv", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    /// Writes `ablation.csv` and `ablation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(TABLE_CSV);
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(TABLE_JSON);
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_the_structural_rows() {
        let names = |p: Preset| p.variants().into_iter().map(|v| v.name).collect::<Vec<_>>();
        assert_eq!(
            names(Preset::Degradation),
            [
                "mask_out",
                "fixed_0.4",
                "fixed_0.6",
                "fixed_0.8",
                "linear_ascent",
                "linear_descent",
                "dynamic_gamma_8",
                "dynamic_gamma_16",
                "dynamic_gamma_32",
                "dynamic_gamma_64"
            ]
        );
        assert_eq!(
            names(Preset::Teacher),
            ["frozen_warmup", "previous_step", "ema_0.5", "ema_0.9", "ema_0.99"]
        );
        assert_eq!(names(Preset::Warmup), ["with_warmup", "without_warmup"]);
        for p in Preset::ALL {
            GridSpec::from_presets(&[p]).validate().unwrap();
        }
    }

    #[test]
    fn grid_errors() {
        let e = GridSpec::parse("variants: []").unwrap_err();
        assert!(e.is_usage() && e.to_string().contains("no variants"), "{e}");
        let e = GridSpec::parse("variants:\n  - name: a\n    set: {degradation.colour: 1}").unwrap_err();
        assert!(e.to_string().contains("variants.a.degradation.colour"), "{e}");
        assert!(GridSpec::parse("presets: [bogus]").is_err());
        assert!(GridSpec::parse("variants:\n  - name: a\n    sett: {}").is_err());
        assert!(GridSpec::parse("variants:\n  - name: a\n  - name: a").is_err());
        assert!(GridSpec::parse("variants:\n  - name: a\n    set: {output.dir: x}").is_err());
    }

    #[test]
    fn grid_values_become_overrides() {
        let g = GridSpec::parse(
            "evaluate: true\nvariants:\n  - name: f\n    set: {degradation.mode: fixed, degradation.fixed_alpha: 0.6, train.lr_batch_scaling: false}",
        )
        .unwrap();
        assert!(g.evaluate);
        assert_eq!(g.variants[0].label, "f");
        assert_eq!(g.variants[0].set["degradation.fixed_alpha"], "0.6");
        assert_eq!(g.variants[0].set["train.lr_batch_scaling"], "false");
    }
}
