use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Low-rank update `W + (alpha / rank) * up . down` of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub name: String,
    /// `(rank, in)`
    pub down: Array2<f64>,
    /// `(out, rank)`
    pub up: Array2<f64>,
}

/// The trainable parameters of a run: low-rank adapters on the denoiser's
/// attention projections plus one embedding row per pseudo-word.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub rank: usize,
    pub alpha: f64,
    pub lora: Vec<LoraPair>,
    /// `(pseudo-words, embedding dim)`, row order matches the token bindings.
    pub pseudo_embeddings: Array2<f64>,
    pub pseudo_tokens: Vec<usize>,
}

/// Shape summary used to check that two states can be combined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub lora: Vec<(String, (usize, usize), (usize, usize))>,
    pub embeddings: (usize, usize),
}

impl AdapterState {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layout(&self) -> Layout {
        Layout {
            lora: self
                .lora
                .iter()
                .map(|p| (p.name.clone(), p.down.dim(), p.up.dim()))
                .collect(),
            embeddings: self.pseudo_embeddings.dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_lora_params() + self.pseudo_embeddings.len()
    }

    /// Number of leading entries of [`flatten`](Self::flatten) that belong to adapters.
    pub fn num_lora_params(&self) -> usize {
        self.lora.iter().map(|p| p.down.len() + p.up.len()).sum()
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.lora.iter_mut().for_each(|p| {
            p.down.fill(0.0);
            p.up.fill(0.0);
        });
        z.pseudo_embeddings.fill(0.0);
        z
    }

    /// Flat view: each adapter's `down` then `up` in order, then the embeddings, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.lora {
            out.extend(p.down.iter());
            out.extend(p.up.iter());
        }
        out.extend(self.pseudo_embeddings.iter());
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, adapter has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for p in &mut self.lora {
            p.down.iter_mut().for_each(|v| *v = it.next().unwrap());
            p.up.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.pseudo_embeddings.iter_mut().for_each(|v| *v = it.next().unwrap());
        Ok(())
    }

    pub fn check_layout(&self, other: &AdapterState) -> Result<()> {
        if self.layout() != other.layout() {
            return Err(Error::Shape("adapter layouts differ".into()));
        }
        Ok(())
    }

    pub fn embedding_row(&self, token: usize) -> Option<usize> {
        self.pseudo_tokens.iter().position(|&t| t == token)
    }

    pub fn to_record(&self) -> AdapterRecord {
        let bytes: Vec<u8> = self.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
        AdapterRecord {
            rank: self.rank,
            alpha: self.alpha,
            layout: self.layout(),
            pseudo_tokens: self.pseudo_tokens.clone(),
            checksum: hex_digest(&bytes),
            params: base64::engine::general_purpose::STANDARD.encode(&bytes),
        }
    }

    pub fn from_record(rec: &AdapterRecord) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&rec.params)
            .map_err(|e| Error::Checkpoint(format!("parameter blob is not valid base64: {e}")))?;
        if hex_digest(&bytes) != rec.checksum {
            return Err(Error::Checkpoint("parameter checksum mismatch".into()));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint("parameter blob length is not a multiple of 8".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut state = AdapterState {
            rank: rec.rank,
            alpha: rec.alpha,
            lora: rec
                .layout
                .lora
                .iter()
                .map(|(name, d, u)| LoraPair {
                    name: name.clone(),
                    down: Array2::zeros(*d),
                    up: Array2::zeros(*u),
                })
                .collect(),
            pseudo_embeddings: Array2::zeros(rec.layout.embeddings),
            pseudo_tokens: rec.pseudo_tokens.clone(),
        };
        state
            .unflatten(&flat)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(state)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialized adapter: exact little-endian `f64` bytes, base64-encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub rank: usize,
    pub alpha: f64,
    pub layout: Layout,
    pub pseudo_tokens: Vec<usize>,
    pub checksum: String,
    pub params: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_state() -> AdapterState {
        AdapterState {
            rank: 2,
            alpha: 2.0,
            lora: vec![LoraPair {
                name: "q".into(),
                down: Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.1),
                up: Array2::from_shape_fn((4, 2), |(i, j)| -((i * 2 + j) as f64) / 7.0),
            }],
            pseudo_embeddings: Array2::from_shape_fn((2, 5), |(i, j)| (i as f64 - j as f64).sin()),
            pseudo_tokens: vec![10, 11],
        }
    }

    #[test]
    fn record_roundtrip_is_bit_exact() {
        let s = sample_state();
        let back = AdapterState::from_record(&s.to_record()).unwrap();
        assert_eq!(s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(s, back);
    }

    #[test]
    fn corrupted_record_is_rejected() {
        let mut rec = sample_state().to_record();
        rec.params.replace_range(0..4, "////");
        assert!(AdapterState::from_record(&rec).is_err());
    }

    proptest::proptest! {
        #[test]
        fn flatten_unflatten_inverse(vals in proptest::collection::vec(-1e3f64..1e3, 6 + 8 + 10)) {
            let mut s = sample_state();
            s.unflatten(&vals).unwrap();
            proptest::prop_assert_eq!(s.flatten(), vals);
        }
    }
}
