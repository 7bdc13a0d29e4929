//! Coreference-aware concept erasure for conditional diffusion models.
//!
//! The crate holds the dataset model, the erasure loss and training loop,
//! embedding-space analysis, the judge-based evaluator, the LLM list
//! generator, and the curation edit logic. A small 2-D toy diffusion model
//! in [`toy`] makes everything runnable without a GPU.

pub mod backend;
pub mod curation;
pub mod dataset;
pub mod embedding;
pub mod eval;
pub mod generator;
pub mod http;
pub mod optim;
pub mod tensor;
pub mod toy;
pub mod trainer;
