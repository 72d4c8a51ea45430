//! Training checkpoints: adapter and momentum snapshots with exact `f64` bytes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{AdapterRecord, AdapterState};
use crate::dual_stream::{MomentumTracker, TeacherMode};
use crate::error::{Error, Result};
use crate::tokenizer::TokenBindings;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    PostWarmup,
    Final,
}

impl CheckpointStage {
    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointStage::PostWarmup => "post_warmup",
            CheckpointStage::Final => "final",
        }
    }
}

impl fmt::Display for CheckpointStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumRecord {
    pub beta: f64,
    pub teacher: TeacherMode,
    pub steps: u64,
    pub params: AdapterRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: CheckpointStage,
    pub config_hash: String,
    pub seed: u64,
    /// Optimizer steps completed when the snapshot was taken.
    pub steps_completed: usize,
    /// Resolved run configuration, so the checkpoint can be evaluated on its own.
    pub config: Value,
    pub bindings: TokenBindings,
    pub online: AdapterRecord,
    pub momentum: Option<MomentumRecord>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: CheckpointStage,
        config_hash: &str,
        seed: u64,
        steps_completed: usize,
        config: Value,
        bindings: &TokenBindings,
        online: &AdapterState,
        momentum: Option<&MomentumTracker>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            stage,
            config_hash: config_hash.to_string(),
            seed,
            steps_completed,
            config,
            bindings: bindings.clone(),
            online: online.to_record(),
            momentum: momentum.map(|m| MomentumRecord {
                beta: m.beta,
                teacher: m.teacher,
                steps: m.steps,
                params: m.params.to_record(),
            }),
        }
    }

    pub fn online(&self) -> Result<AdapterState> {
        AdapterState::from_record(&self.online).map_err(|e| Error::Checkpoint(format!("online adapter: {e}")))
    }

    pub fn momentum(&self) -> Result<Option<MomentumTracker>> {
        let Some(m) = &self.momentum else { return Ok(None) };
        let params =
            AdapterState::from_record(&m.params).map_err(|e| Error::Checkpoint(format!("momentum adapter: {e}")))?;
        Ok(Some(MomentumTracker {
            beta: m.beta,
            teacher: m.teacher,
            params,
            steps: m.steps,
        }))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(ckpt)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, checking the format version and every parameter checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{} is not a checkpoint: {e}", path.display())))?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "{} has format version {v}, expected {FORMAT_VERSION}",
                path.display()
            )))
        }
        None => return Err(Error::Checkpoint(format!("{} has no format version", path.display()))),
    }
    let ckpt: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("{} is corrupt: {e}", path.display())))?;
    ckpt.online()?;
    ckpt.momentum()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_stream::init_momentum;
    use ndarray::Array2;

    fn state(offset: f64) -> AdapterState {
        AdapterState {
            rank: 2,
            alpha: 2.0,
            lora: vec![crate::backbone::LoraPair {
                name: "attn.to_q".into(),
                down: Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 / 3.0 + offset),
                up: Array2::from_shape_fn((3, 2), |(i, j)| 1.0 / (1.0 + (i + j) as f64) - offset),
            }],
            pseudo_embeddings: Array2::from_shape_fn((2, 4), |(i, j)| ((i + 2 * j) as f64).cos()),
            pseudo_tokens: vec![30, 31],
        }
    }

    fn sample() -> Checkpoint {
        let online = state(0.1);
        let mut m = init_momentum(&state(0.0), 0.9, TeacherMode::Ema).unwrap();
        m.steps = 3;
        Checkpoint::new(
            CheckpointStage::Final,
            "abc",
            5,
            12,
            serde_json::json!({"k": 1}),
            &TokenBindings::default(),
            &online,
            Some(&m),
        )
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let bits = |s: &AdapterState| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.online().unwrap()), bits(&state(0.1)));
        assert_eq!(bits(&back.momentum().unwrap().unwrap().params), bits(&state(0.0)));
    }

    #[test]
    fn wrong_version_and_corruption_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut c = sample();
        c.format_version = FORMAT_VERSION + 1;
        save_checkpoint(&c, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("format version"));

        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let i = text.find("\"params\": \"").unwrap() + 11;
        let mut bytes = text.into_bytes();
        bytes[i] = if bytes[i] == b'A' { b'B' } else { b'A' };
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&dir.path().join("missing")).unwrap_err().is_usage());
    }
}
