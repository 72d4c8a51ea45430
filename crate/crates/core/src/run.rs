//! Run directories: resolved config, manifest, step log and checkpoints.
//!
//! Layout under `output.dir/<name>`:
//!
//! ```text
//! config.resolved          resolved configuration (YAML)
//! manifest.json            seed, config hash, versions, rates, stage outcomes
//! steps.log                one JSON record per optimizer step
//! checkpoints/post_warmup
//! checkpoints/final
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::real::{self, RealBackendRequest};
use crate::backbone::toy::{ToyBackbone, ToyConfig};
use crate::backbone::{AdapterState, Backbone};
use crate::checkpoint::{self, Checkpoint, CheckpointStage};
use crate::config::{BackboneKind, ConfigFile, Precision, RunConfig};
use crate::dataset::{self, PairSpec};
use crate::dual_stream::{Stage, StepLossReport};
use crate::error::{Error, Result};
use crate::tokenizer::register_pseudo_words;
use crate::trainer::{self, StageRates, TrainOutcome, TrainSetup};

pub const MANIFEST_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.resolved";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STEPS_FILE: &str = "steps.log";

/// Loads the pair named by the config: inline in the config file, or `data.pair`.
pub fn load_run_pair(cfg: &mut RunConfig, file: Option<(&Path, &ConfigFile)>) -> Result<PairSpec> {
    if let Some((path, f)) = file {
        if let Some(inline) = &f.inline_pair {
            if cfg.data.pair.is_some() {
                return Err(Error::config("data.pair", "config defines the pair inline and also names a pair file"));
            }
            let (pair, warnings) = dataset::pair_from_file(inline, &f.base_dir, path)?;
            for w in warnings {
                log::warn!("{w:?}");
            }
            cfg.data.pair = Some(absolute(path)?);
            return Ok(pair);
        }
    }
    let path = cfg
        .data
        .pair
        .clone()
        .ok_or_else(|| Error::config("data.pair", "no pair given (set data.pair or define samples inline)"))?;
    let pair = dataset::load_pair(&path)?;
    cfg.data.pair = Some(absolute(&path)?);
    Ok(pair)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

pub fn toy_config(cfg: &RunConfig, pair: &PairSpec) -> ToyConfig {
    let b = &cfg.backbone;
    ToyConfig {
        resolution: b.resolution.unwrap_or(pair.resolution),
        attn_size: b.attn_size,
        num_timesteps: b.num_timesteps,
        lora_rank: b.lora_rank,
        lora_alpha: b.lora_alpha,
        init_seed: b.init_seed,
        ..ToyConfig::default()
    }
}

/// Builds the configured backbone. Only the toy backbone is linked into this build.
pub fn build_backbone(cfg: &RunConfig, pair: &PairSpec) -> Result<ToyBackbone> {
    match cfg.backbone.kind {
        BackboneKind::Toy => ToyBackbone::new(toy_config(cfg, pair)),
        BackboneKind::Real => match real::load(&RealBackendRequest::from_env(&cfg.backbone.model_id))? {},
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Completed,
    Skipped,
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub steps: usize,
    /// Schedule indices `[first, last]` covered by the stage.
    pub step_range: Option<(usize, usize)>,
    pub effective_lr: StageRates,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub final_total: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub tailor_core: String,
    pub manifest_format: u32,
    pub checkpoint_format: u32,
    pub backbone: String,
    pub model_id: Option<String>,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pair_id: String,
    pub config_hash: String,
    pub pair_digest: String,
    pub seed: u64,
    pub config: RunConfig,
    pub versions: Versions,
    pub images_per_step: usize,
    pub lr_batch_scaling: bool,
    pub schedule_length: usize,
    pub created_at: String,
    pub updated_at: String,
    pub stages: Vec<StageOutcome>,
    pub frozen_base_verified: Option<bool>,
    pub checkpoints: Vec<String>,
    pub status: StageStatus,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, pair: &PairSpec, hash: &str) -> Self {
        let settings = cfg.train_settings(None);
        let images = pair.image_count();
        let stage = |stage, steps, first: usize| StageOutcome {
            stage,
            status: StageStatus::Pending,
            steps,
            step_range: (steps > 0).then(|| (first, first + steps - 1)),
            effective_lr: settings.rates(stage, images),
            started_at: None,
            finished_at: None,
            final_total: None,
            error: None,
        };
        let t = now();
        RunManifest {
            pair_id: pair.pair_id.clone(),
            config_hash: hash.to_string(),
            pair_digest: crate::config::pair_digest(pair),
            seed: cfg.train.seed,
            config: cfg.clone(),
            versions: Versions {
                tailor_core: env!("CARGO_PKG_VERSION").to_string(),
                manifest_format: MANIFEST_VERSION,
                checkpoint_format: checkpoint::FORMAT_VERSION,
                backbone: match cfg.backbone.kind {
                    BackboneKind::Toy => "toy".into(),
                    BackboneKind::Real => "real".into(),
                },
                model_id: (cfg.backbone.kind == BackboneKind::Real).then(|| cfg.backbone.model_id.clone()),
                precision: cfg.precision(),
            },
            images_per_step: images,
            lr_batch_scaling: cfg.train.lr_batch_scaling,
            schedule_length: settings.schedule.total_steps,
            created_at: t.clone(),
            updated_at: t,
            stages: vec![
                stage(Stage::Warmup, cfg.warmup.steps, 0),
                stage(Stage::Dsbal, cfg.dsbal.steps, cfg.warmup.steps),
            ],
            frozen_base_verified: None,
            checkpoints: Vec::new(),
            status: StageStatus::Pending,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageOutcome {
        self.stages.iter_mut().find(|s| s.stage == stage).expect("both stages present")
    }

    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.updated_at = now();
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn default_run_name(pair: &PairSpec, hash: &str) -> String {
    format!("{}-{}", pair.pair_id, &hash[..12])
}

pub fn run_directory(cfg: &RunConfig, pair: &PairSpec, hash: &str) -> PathBuf {
    let name = cfg.output.name.clone().unwrap_or_else(|| default_run_name(pair, hash));
    cfg.output.dir.join(name)
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
    pub reports: Vec<StepLossReport>,
}

struct StepLog {
    out: BufWriter<File>,
    path: PathBuf,
    reports: Vec<StepLossReport>,
}

impl StepLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(StepLog {
            out: BufWriter::new(file),
            path,
            reports: Vec::new(),
        })
    }

    fn record(&mut self, r: &StepLossReport) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        log::debug!("{} step {}: total {:.6}", r.stage, r.step, r.total);
        self.reports.push(r.clone());
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_steps_log(dir: &Path) -> Result<Vec<StepLossReport>> {
    let path = dir.join(STEPS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Trains `cfg` on `pair` and writes the run directory.
///
/// With `resume`, the warm-up stage is restored from a post-warm-up
/// checkpoint whose config hash must match.
pub fn train_run<B: Backbone>(
    cfg: &RunConfig,
    pair: PairSpec,
    backbone: &mut B,
    resume: Option<&Checkpoint>,
) -> Result<RunResult> {
    let hash = cfg.hash(&pair);
    if let Some(c) = resume {
        if c.stage != CheckpointStage::PostWarmup {
            return Err(Error::Checkpoint(format!("can only resume from a post_warmup checkpoint, got {}", c.stage)));
        }
        if c.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} differs from the resolved config {hash}",
                c.config_hash
            )));
        }
    }
    let dir = run_directory(cfg, &pair, &hash);
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join(CONFIG_FILE);
    std::fs::write(&resolved, serde_yaml::to_string(cfg)?).map_err(|e| Error::io(&resolved, e))?;

    let mut manifest = RunManifest::new(cfg, &pair, &hash);
    manifest.status = StageStatus::Running;
    manifest.write(&dir)?;

    let result = execute(cfg, pair, backbone, resume, &hash, &dir, &mut manifest);
    match result {
        Ok((outcome, reports)) => {
            manifest.status = StageStatus::Completed;
            manifest.write(&dir)?;
            Ok(RunResult {
                dir,
                manifest,
                outcome,
                reports,
            })
        }
        Err(e) => {
            for s in manifest.stages.iter_mut().filter(|s| s.status == StageStatus::Running) {
                s.status = StageStatus::Failed;
                s.finished_at = Some(now());
                s.error = Some(e.to_string());
            }
            manifest.status = StageStatus::Failed;
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

fn execute<B: Backbone>(
    cfg: &RunConfig,
    pair: PairSpec,
    backbone: &mut B,
    resume: Option<&Checkpoint>,
    hash: &str,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(TrainOutcome, Vec<StepLossReport>)> {
    let frozen_before = backbone.frozen_parameters();
    let setup = TrainSetup::new(backbone, pair, cfg.train_settings(Some(dir)))?;
    let backbone: &B = backbone;
    let mut log = StepLog::create(dir.join(STEPS_FILE))?;
    let config_value = serde_json::to_value(cfg)?;
    let snapshot = |stage, steps, online: &_, momentum| {
        Checkpoint::new(stage, hash, cfg.train.seed, steps, config_value.clone(), &setup.bindings, online, momentum)
    };

    let warmed = match resume {
        Some(c) => {
            let w = c.online()?;
            w.check_layout(&setup.init_adapter(backbone)?)?;
            if c.bindings != setup.bindings {
                return Err(Error::Checkpoint("checkpoint pseudo-word bindings differ from this run".into()));
            }
            let s = manifest.stage_mut(Stage::Warmup);
            s.status = StageStatus::Resumed;
            s.finished_at = Some(now());
            w
        }
        None => {
            let s = manifest.stage_mut(Stage::Warmup);
            s.status = if cfg.warmup.steps == 0 { StageStatus::Skipped } else { StageStatus::Running };
            s.started_at = Some(now());
            manifest.write(dir)?;
            let initial = setup.init_adapter(backbone)?;
            let w = trainer::run_warmup(&setup, backbone, initial, &mut |r| log.record(r))?;
            log.flush()?;
            let s = manifest.stage_mut(Stage::Warmup);
            if s.status == StageStatus::Running {
                s.status = StageStatus::Completed;
            }
            s.finished_at = Some(now());
            s.final_total = log.reports.last().map(|r| r.total);
            w
        }
    };
    let path = dir.join("checkpoints").join(CheckpointStage::PostWarmup.file_name());
    checkpoint::save_checkpoint(&snapshot(CheckpointStage::PostWarmup, cfg.warmup.steps, &warmed, None), &path)?;
    manifest.checkpoints.push(format!("checkpoints/{}", CheckpointStage::PostWarmup.file_name()));

    let s = manifest.stage_mut(Stage::Dsbal);
    s.status = StageStatus::Running;
    s.started_at = Some(now());
    manifest.write(dir)?;
    let (online, tracker) = trainer::run_dsbal(&setup, backbone, warmed.clone(), &mut |r| log.record(r))?;
    log.flush()?;
    let s = manifest.stage_mut(Stage::Dsbal);
    s.status = StageStatus::Completed;
    s.finished_at = Some(now());
    s.final_total = log.reports.last().map(|r| r.total);

    let path = dir.join("checkpoints").join(CheckpointStage::Final.file_name());
    let total = cfg.warmup.steps + cfg.dsbal.steps;
    checkpoint::save_checkpoint(&snapshot(CheckpointStage::Final, total, &online, Some(&tracker)), &path)?;
    manifest.checkpoints.push(format!("checkpoints/{}", CheckpointStage::Final.file_name()));

    let unchanged = bits(&frozen_before) == bits(&backbone.frozen_parameters());
    manifest.frozen_base_verified = Some(unchanged);
    if !unchanged {
        return Err(Error::Backbone("frozen base parameters changed during training".into()));
    }
    Ok((
        TrainOutcome {
            warmed,
            online,
            tracker,
        },
        std::mem::take(&mut log.reports),
    ))
}

/// A checkpoint bound to its pair and a backbone with the pseudo-words registered.
pub struct Trained {
    pub config: RunConfig,
    pub pair: PairSpec,
    pub backbone: ToyBackbone,
    pub adapter: AdapterState,
    pub checkpoint: Checkpoint,
}

/// Loads a checkpoint and rebuilds the run it came from. The pair file must
/// be unchanged since training (its digest is part of the config hash).
pub fn load_trained(path: &Path) -> Result<Trained> {
    let checkpoint = checkpoint::load_checkpoint(path)?;
    let mut config: RunConfig = serde_json::from_value(checkpoint.config.clone())
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let pair = load_run_pair(&mut config, None)?;
    let hash = config.hash(&pair);
    if hash != checkpoint.config_hash {
        return Err(Error::Checkpoint(format!(
            "pair or config changed since training (hash {hash}, checkpoint {})",
            checkpoint.config_hash
        )));
    }
    let mut backbone = build_backbone(&config, &pair)?;
    let bindings = register_pseudo_words(&pair, backbone.tokenizer_mut())?;
    if bindings != checkpoint.bindings {
        return Err(Error::Checkpoint("pseudo-word bindings differ from the checkpoint".into()));
    }
    let adapter = checkpoint.online()?;
    adapter.check_layout(&backbone.init_adapter(&bindings, config.train.seed)?)?;
    Ok(Trained {
        config,
        pair,
        backbone,
        adapter,
        checkpoint,
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_pair;

    fn small_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone.kind = BackboneKind::Toy;
        cfg.backbone.attn_size = 4;
        cfg.backbone.lora_rank = 4;
        cfg.backbone.lora_alpha = 4.0;
        cfg.warmup.steps = 4;
        cfg.dsbal.steps = 5;
        cfg.output.dir = out.to_path_buf();
        cfg
    }

    fn run(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<RunResult> {
        let pair = synthetic_pair(16, 2, 0);
        let mut bb = build_backbone(cfg, &pair).unwrap();
        train_run(cfg, pair, &mut bb, resume)
    }

    #[test]
    fn writes_the_run_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let res = run(&cfg, None).unwrap();
        for f in [CONFIG_FILE, MANIFEST_FILE, STEPS_FILE, "checkpoints/post_warmup", "checkpoints/final"] {
            assert!(res.dir.join(f).is_file(), "{f}");
        }
        let m = RunManifest::read(&res.dir).unwrap();
        assert_eq!(m.status, StageStatus::Completed);
        assert_eq!(m.frozen_base_verified, Some(true));
        assert_eq!(m.stages[0].effective_lr.adapter, 1e-4 * 4.0);
        assert_eq!(m.stages[1].step_range, Some((4, 8)));
        let steps = read_steps_log(&res.dir).unwrap();
        assert_eq!(steps.len(), 9);
        assert_eq!(steps, res.reports);
        let back: RunConfig = serde_yaml::from_str(&std::fs::read_to_string(res.dir.join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn resume_from_post_warmup_matches_uninterrupted() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(tmp.path());
        cfg.output.name = Some("full".into());
        let full = run(&cfg, None).unwrap();
        let ckpt = checkpoint::load_checkpoint(&full.dir.join("checkpoints/post_warmup")).unwrap();
        cfg.output.name = Some("resumed".into());
        let resumed = run(&cfg, Some(&ckpt)).unwrap();
        assert_eq!(resumed.reports, full.reports[cfg.warmup.steps..].to_vec());
        let b = |s: &AdapterState| bits(&s.flatten());
        assert_eq!(b(&resumed.outcome.online), b(&full.outcome.online));
        assert_eq!(b(&resumed.outcome.tracker.params), b(&full.outcome.tracker.params));
        assert_eq!(resumed.manifest.stages[0].status, StageStatus::Resumed);

        cfg.dsbal.beta = 0.5;
        assert!(matches!(run(&cfg, Some(&ckpt)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn trained_checkpoint_reloads_against_its_pair() {
        let tmp = tempfile::tempdir().unwrap();
        let pair_path = dataset::save_pair(&synthetic_pair(16, 2, 0), &tmp.path().join("pair")).unwrap();
        let mut cfg = small_cfg(tmp.path());
        cfg.data.pair = Some(pair_path);
        let pair = load_run_pair(&mut cfg, None).unwrap();
        let mut bb = build_backbone(&cfg, &pair).unwrap();
        let res = train_run(&cfg, pair, &mut bb, None).unwrap();
        let t = load_trained(&res.dir.join("checkpoints/final")).unwrap();
        assert_eq!(t.adapter, res.outcome.online);
        assert_eq!(t.config, cfg);

        let other = synthetic_pair(16, 2, 5);
        dataset::save_pair(&other, &tmp.path().join("pair")).unwrap();
        assert!(matches!(load_trained(&res.dir.join("checkpoints/final")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn real_backend_is_reported_unavailable() {
        let cfg = RunConfig::default();
        let err = build_backbone(&cfg, &synthetic_pair(16, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable(_)));
    }
}
