//! The contract a conditional diffusion model must satisfy to be erased.
//!
//! Parameters live outside the backend as a flat `f64` vector so the trainer
//! can hold the frozen and tuned copies side by side. The backend describes
//! their layout through named [`ParamGroup`]s.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("parameter vector has {got} entries, backend expects {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("timestep {t} outside schedule of {steps}")]
    Timestep { t: usize, steps: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    CrossAttentionQuery,
    CrossAttentionKey,
    CrossAttentionValue,
    CrossAttentionOut,
    Other,
}

/// A contiguous named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Conditional noise predictor plus the sampler that produces training latents.
pub trait DiffusionBackend: Send + Sync {
    fn backend_id(&self) -> String;

    /// Number of discrete diffusion timesteps; valid `t` is `0..num_timesteps()`.
    fn num_timesteps(&self) -> usize;

    fn param_groups(&self) -> &[ParamGroup];

    fn num_params(&self) -> usize {
        self.param_groups().iter().map(|g| g.len).sum()
    }

    /// `ε(x_t, t, cond)`; `None` is the unconditional (empty-prompt) branch.
    /// Deterministic for fixed inputs; output shape equals `latent`'s.
    fn predict_noise(
        &self,
        params: &[f64],
        latent: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor, BackendError>;

    /// Adds `(∂ε/∂params)ᵀ · upstream` into `grad`.
    fn accumulate_grad(
        &self,
        params: &[f64],
        latent: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        upstream: &Tensor,
        grad: &mut [f64],
    ) -> Result<(), BackendError>;

    /// Runs the sampler from pure noise, conditioned on `cond`, down to
    /// timestep `t` and returns `x_t`.
    fn generate_latent(
        &self,
        params: &[f64],
        cond: Option<&Tensor>,
        t: usize,
        seed: u64,
    ) -> Result<Tensor, BackendError>;

    fn save_weights(&self, params: &[f64], path: &Path) -> Result<(), BackendError>;

    fn load_weights(&self, path: &Path) -> Result<Vec<f64>, BackendError>;
}
