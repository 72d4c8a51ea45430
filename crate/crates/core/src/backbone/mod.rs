//! Diffusion backbone abstraction.
//!
//! Training only needs a handful of capabilities from the text-to-image
//! model: encode an image to a latent, noise it, predict the noise under a
//! prompt, expose the cross-attention map of one token, and backpropagate
//! loss gradients into the trainable [`AdapterState`]. Everything else in
//! the base model stays frozen.

mod adapter;
pub mod real;
pub mod toy;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use adapter::{AdapterRecord, AdapterState, Layout, LoraPair};

use crate::error::{Error, Result};
use crate::grid::Planes;
use crate::tokenizer::{TokenBindings, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentDims {
    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// A latent noised to timestep `t` together with the unscaled noise used.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLatent {
    pub latent: Planes,
    pub timestep: usize,
    pub noise: Planes,
}

/// Encoded prompt: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<usize>,
    pub encoded: Array2<f64>,
}

/// Result of one denoiser pass, with whatever the backend needs for backward.
pub struct ForwardPass<C> {
    pub prediction: Planes,
    /// Normalized cross-attention map of the requested token, at `attn_dims`.
    pub attention: Option<Array2<f64>>,
    pub cache: C,
}

pub trait Backbone: Send + Sync {
    type Cache;

    fn kind(&self) -> &'static str;
    fn resolution(&self) -> usize;
    fn latent_dims(&self) -> LatentDims;
    fn attn_dims(&self) -> (usize, usize);
    fn num_timesteps(&self) -> usize;

    fn tokenizer(&self) -> &dyn Tokenizer;
    fn tokenizer_mut(&mut self) -> &mut dyn Tokenizer;

    /// Frozen embedding of a base-vocabulary token.
    fn token_embedding(&self, token: usize) -> Result<Array1<f64>>;

    /// Fresh adapter: zero low-rank deltas, pseudo-words seeded from their label tokens.
    fn init_adapter(&self, bindings: &TokenBindings, seed: u64) -> Result<AdapterState>;

    fn encode_image(&self, pixels: &Planes) -> Result<Planes>;
    fn decode_latent(&self, latent: &Planes) -> Result<Planes>;

    /// `(signal, noise)` coefficients of the forward process at `t`.
    fn noise_coefficients(&self, t: usize) -> Result<(f64, f64)>;

    fn add_noise(&self, clean: &Planes, noise: &Planes, t: usize) -> Result<NoisyLatent> {
        if clean.dim() != noise.dim() {
            return Err(Error::Shape(format!(
                "latent {:?} vs noise {:?}",
                clean.dim(),
                noise.dim()
            )));
        }
        let (a, s) = self.noise_coefficients(t)?;
        let mut latent = clean.clone();
        latent.zip_mut_with(noise, |z, &e| *z = a * *z + s * e);
        Ok(NoisyLatent {
            latent,
            timestep: t,
            noise: noise.clone(),
        })
    }

    fn embed_text(&self, tokens: &[usize], adapter: &AdapterState) -> Result<TextEmbedding>;

    /// Denoiser pass. When `attn_token` is set the pass also returns that
    /// token's normalized cross-attention map.
    fn forward(
        &self,
        adapter: &AdapterState,
        latent: &Planes,
        t: usize,
        tokens: &[usize],
        attn_token: Option<usize>,
    ) -> Result<ForwardPass<Self::Cache>>;

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// of the prediction and, if requested in forward, of the attention map.
    fn backward(
        &self,
        adapter: &AdapterState,
        pass: &ForwardPass<Self::Cache>,
        grad_prediction: &Planes,
        grad_attention: Option<&Array2<f64>>,
        grads: &mut AdapterState,
    ) -> Result<()>;

    /// Every frozen base parameter, in a fixed order.
    fn frozen_parameters(&self) -> Vec<f64>;

    fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.tokenizer().tokenize(text)
    }

    fn predict_noise(
        &self,
        adapter: &AdapterState,
        latent: &Planes,
        t: usize,
        tokens: &[usize],
    ) -> Result<Planes> {
        Ok(self.forward(adapter, latent, t, tokens, None)?.prediction)
    }

    fn cross_attention_maps(
        &self,
        adapter: &AdapterState,
        token: usize,
        latent: &Planes,
        t: usize,
        tokens: &[usize],
    ) -> Result<Array2<f64>> {
        self.forward(adapter, latent, t, tokens, Some(token))?
            .attention
            .ok_or_else(|| Error::Backbone("backend returned no attention map".into()))
    }
}

/// Min-max normalizes to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_attention(raw: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range > 0.0 {
        raw.mapv(|v| (v - lo) / range)
    } else {
        Array2::zeros(raw.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_normalizes_to_zero() {
        let raw = Array2::from_elem((4, 4), 0.25);
        assert_eq!(normalize_attention(&raw), Array2::<f64>::zeros((4, 4)));
    }

    #[test]
    fn normalized_map_spans_unit_interval() {
        let raw = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 + 2.0);
        let n = normalize_attention(&raw);
        let min = n.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
    }
}
