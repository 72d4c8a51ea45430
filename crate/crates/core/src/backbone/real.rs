//! Loader stub for a pretrained latent-diffusion backbone.
//!
//! This build links no neural-network runtime, so every attempt to load a
//! real model reports [`Error::BackendUnavailable`]. Training and evaluation
//! code paths are generic over [`super::Backbone`] and work unchanged once a
//! backend implementing the trait is provided.

use std::path::PathBuf;

use crate::error::{Error, Result};

/// Environment variable naming the local model cache directory.
pub const MODEL_DIR_ENV: &str = "TAILOR_MODEL_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealBackendRequest {
    pub model_id: String,
    pub model_dir: Option<PathBuf>,
}

impl RealBackendRequest {
    pub fn from_env(model_id: &str) -> Self {
        RealBackendRequest {
            model_id: model_id.to_string(),
            model_dir: std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from),
        }
    }
}

/// Always fails in this build; see the module docs.
pub fn load(request: &RealBackendRequest) -> Result<std::convert::Infallible> {
    let dir = request
        .model_dir
        .as_ref()
        .map(|d| d.display().to_string())
        .unwrap_or_else(|| format!("unset (${MODEL_DIR_ENV})"));
    Err(Error::BackendUnavailable(format!(
        "model `{}` (model dir {dir}) needs a latent-diffusion runtime, which is not linked into this build; use backbone.kind=toy",
        request.model_id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_reports_backend_unavailable() {
        let req = RealBackendRequest {
            model_id: "sd-2.1".into(),
            model_dir: None,
        };
        let err = load(&req).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable(_)));
        assert!(err.to_string().starts_with("real backend required"));
    }
}
