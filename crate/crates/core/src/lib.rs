//! Component-controllable personalization of text-to-image diffusion models.
//!
//! The crate learns one concept and one of its components from a handful of
//! masked reference photos. Training runs a joint warm-up followed by a
//! balancing stage in which the online adapter optimizes only the sample with
//! the largest masked diffusion loss while an EMA teacher keeps the other
//! sample from drifting. Out-of-mask regions of the references are perturbed
//! with noise whose intensity decays over training.

pub mod ablation;
pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod degradation;
pub mod dual_stream;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod losses;
pub mod optim;
pub mod run;
pub mod seed;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
