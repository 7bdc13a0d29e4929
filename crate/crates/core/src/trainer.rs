//! ESD anchor, the certainty-weighted coref/retain loss, batch sampling for
//! every variant, and the fine-tuning loop.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, DiffusionBackend, ParamGroup, ParamKind};
use crate::dataset::{has_errors, validate_record, write_atomic, ConceptEntry, ConceptRecord};
use crate::embedding::{ball_uniform, EmbeddingError, TextEncoder};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{ShapeError, Tensor};

/// Lower clamp for perturbed certainty weights.
pub const MIN_NOISY_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Crce,
    CrceFixed,
    CrceSphere,
    EsdOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintyMode {
    #[default]
    Llm,
    UniformOne,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSide {
    Coref,
    Retain,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    #[default]
    CrossAttentionKv,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasureConfig {
    pub eta: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(alias = "M")]
    pub m: usize,
    #[serde(alias = "N")]
    pub n: usize,
    pub variant: Variant,
    pub certainty_mode: CertaintyMode,
    pub noise_sigma: f64,
    pub noise_side: NoiseSide,
    pub param_scope: ParamScope,
    pub sphere_radius: Option<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            iterations: 500,
            learning_rate: 1e-5,
            m: 5,
            n: 3,
            variant: Variant::Crce,
            certainty_mode: CertaintyMode::Llm,
            noise_sigma: 0.0,
            noise_side: NoiseSide::Both,
            param_scope: ParamScope::CrossAttentionKv,
            sphere_radius: None,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field} must be finite")]
    NotFinite { field: &'static str },
    #[error("learning_rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("variant crce_sphere requires sphere_radius > 0")]
    SphereRadius,
    #[error("noise_sigma must lie in [0, 1), got {0}")]
    NoiseSigma(f64),
}

impl ErasureConfig {
    /// Settings for the in-repo toy backend: M=3, N=2 and an adaptive
    /// optimizer with a step size suited to a few-thousand-parameter model.
    pub fn toy() -> Self {
        Self {
            m: 3,
            n: 2,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.eta.is_finite() {
            return Err(ConfigError::NotFinite { field: "eta" });
        }
        if !self.learning_rate.is_finite() {
            return Err(ConfigError::NotFinite { field: "learning_rate" });
        }
        if self.learning_rate <= 0.0 {
            return Err(ConfigError::LearningRate(self.learning_rate));
        }
        if self.variant == Variant::CrceSphere && !self.sphere_radius.is_some_and(|r| r > 0.0 && r.is_finite()) {
            return Err(ConfigError::SphereRadius);
        }
        if self.certainty_mode == CertaintyMode::Noise && !(0.0..1.0).contains(&self.noise_sigma) {
            return Err(ConfigError::NoiseSigma(self.noise_sigma));
        }
        Ok(())
    }

    /// Corefs and retains per step after the variant is applied.
    pub fn effective_mn(&self) -> (usize, usize) {
        match self.variant {
            Variant::EsdOnly => (0, 0),
            _ => (self.m, self.n),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("record {0:?} is not approved or fails validation")]
    InvalidRecord(String),
    #[error("cannot draw {requested} {side} per step from {available} training entries")]
    SampleSize {
        side: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("batch declares M={m} but carries no coref conditionings")]
    EmptyCorefs { m: usize },
    #[error("weight {weight} for {id:?} is not a positive finite number")]
    Weight { id: String, weight: f64 },
    #[error("backend has no cross-attention key/value groups")]
    MissingScope,
    #[error("non-finite loss at step {step}: {batch}")]
    NonFinite { step: usize, batch: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// `eps_uncond − eta·(eps_cond − eps_uncond)`
pub fn compute_anchor(eps_uncond: &Tensor, eps_cond: &Tensor, eta: f64) -> Result<Tensor, ShapeError> {
    eps_uncond.zip_with(eps_cond, |u, c| u - eta * (c - u))
}

/// Squared L2 norm of the difference, summed over all elements.
pub fn esd_loss(eps_tuned_on_c: &Tensor, anchor: &Tensor) -> Result<f64, ShapeError> {
    Ok(eps_tuned_on_c.sub(anchor)?.squared_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub esd_term: f64,
    pub coref_term: f64,
    pub retain_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(esd_term: f64, coref_term: f64, retain_term: f64) -> Self {
        Self {
            esd_term,
            coref_term,
            retain_term,
            total: esd_term + coref_term + retain_term,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.esd_term.is_finite() && self.coref_term.is_finite() && self.retain_term.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCond {
    pub id: String,
    pub cond: Tensor,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub x_t: Tensor,
    pub t: usize,
    pub target_cond: Tensor,
    pub coref_conds: Vec<WeightedCond>,
    pub retain_conds: Vec<WeightedCond>,
}

impl NoiseBatch {
    pub fn coref_ids(&self) -> Vec<String> {
        self.coref_conds.iter().map(|c| c.id.clone()).collect()
    }

    pub fn retain_ids(&self) -> Vec<String> {
        self.retain_conds.iter().map(|c| c.id.clone()).collect()
    }

    pub fn describe(&self) -> String {
        let fmt = |v: &[WeightedCond]| -> String {
            v.iter().map(|c| format!("{}@{}", c.id, c.weight)).collect::<Vec<_>>().join(", ")
        };
        format!(
            "t={} x_t.shape={:?} corefs=[{}] retains=[{}]",
            self.t,
            self.x_t.shape(),
            fmt(&self.coref_conds),
            fmt(&self.retain_conds)
        )
    }

    fn check_weights(&self) -> Result<(), TrainError> {
        for c in self.coref_conds.iter().chain(&self.retain_conds) {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(TrainError::Weight {
                    id: c.id.clone(),
                    weight: c.weight,
                });
            }
        }
        Ok(())
    }
}

/// Weighted CRCE loss for one batch.
///
/// Weights above 1 are accepted so homogeneity in the weights can be checked
/// directly; the sampler never produces them.
pub fn crce_loss(
    batch: &NoiseBatch,
    tuned: &[f64],
    frozen: &[f64],
    backend: &dyn DiffusionBackend,
    eta: f64,
) -> Result<LossBreakdown, TrainError> {
    loss_impl(batch, tuned, frozen, backend, eta, None)
}

/// Like [`crce_loss`], and adds the gradient with respect to `tuned` into `grad`.
pub fn crce_loss_and_grad(
    batch: &NoiseBatch,
    tuned: &[f64],
    frozen: &[f64],
    backend: &dyn DiffusionBackend,
    eta: f64,
    grad: &mut [f64],
) -> Result<LossBreakdown, TrainError> {
    loss_impl(batch, tuned, frozen, backend, eta, Some(grad))
}

fn loss_impl(
    batch: &NoiseBatch,
    tuned: &[f64],
    frozen: &[f64],
    backend: &dyn DiffusionBackend,
    eta: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown, TrainError> {
    batch.check_weights()?;
    let (x, t) = (&batch.x_t, batch.t);
    let eps_u = backend.predict_noise(frozen, x, t, None)?;
    let eps_c = backend.predict_noise(frozen, x, t, Some(&batch.target_cond))?;
    let anchor = compute_anchor(&eps_u, &eps_c, eta)?;

    let mut backprop = |cond: &Tensor, pred: &Tensor, reference: &Tensor, scale: f64| -> Result<(), TrainError> {
        if let Some(g) = grad.as_deref_mut() {
            let up = pred.zip_with(reference, |p, r| 2.0 * scale * (p - r))?;
            backend.accumulate_grad(tuned, x, t, Some(cond), &up, g)?;
        }
        Ok(())
    };

    let pred = backend.predict_noise(tuned, x, t, Some(&batch.target_cond))?;
    let esd = esd_loss(&pred, &anchor)?;
    backprop(&batch.target_cond, &pred, &anchor, 1.0)?;

    let mut coref = 0.0;
    if !batch.coref_conds.is_empty() {
        let m = batch.coref_conds.len() as f64;
        let mut sum = 0.0;
        for c in &batch.coref_conds {
            let pred = backend.predict_noise(tuned, x, t, Some(&c.cond))?;
            sum += c.weight * esd_loss(&pred, &anchor)?;
            backprop(&c.cond, &pred, &anchor, c.weight / m)?;
        }
        coref = sum / m;
    }

    let mut retain = 0.0;
    if !batch.retain_conds.is_empty() {
        let n = batch.retain_conds.len() as f64;
        let mut sum = 0.0;
        for r in &batch.retain_conds {
            let reference = backend.predict_noise(frozen, x, t, Some(&r.cond))?;
            let pred = backend.predict_noise(tuned, x, t, Some(&r.cond))?;
            sum += r.weight * esd_loss(&pred, &reference)?;
            backprop(&r.cond, &pred, &reference, r.weight / n)?;
        }
        retain = sum / n;
    }

    Ok(LossBreakdown::new(esd, coref, retain))
}

/// Trainable mask over the flat parameter vector.
pub fn apply_param_scope(groups: &[ParamGroup], scope: ParamScope) -> Result<Vec<bool>, TrainError> {
    let total: usize = groups.iter().map(|g| g.offset + g.len).max().unwrap_or(0);
    let mut mask = vec![false; total];
    let selected: Vec<&ParamGroup> = match scope {
        ParamScope::Full => groups.iter().collect(),
        ParamScope::CrossAttentionKv => {
            let kv: Vec<&ParamGroup> = groups
                .iter()
                .filter(|g| matches!(g.kind, ParamKind::CrossAttentionKey | ParamKind::CrossAttentionValue))
                .collect();
            let has = |k: ParamKind| kv.iter().any(|g| g.kind == k);
            if !has(ParamKind::CrossAttentionKey) || !has(ParamKind::CrossAttentionValue) {
                return Err(TrainError::MissingScope);
            }
            kv
        }
    };
    for g in selected {
        mask[g.range()].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
struct Candidate {
    id: String,
    cond: Tensor,
    weight: f64,
}

/// Draws one [`NoiseBatch`] per training step.
pub struct BatchSampler {
    config: ErasureConfig,
    target_cond: Tensor,
    corefs: Vec<Candidate>,
    retains: Vec<Candidate>,
    fixed: Option<(Vec<usize>, Vec<usize>)>,
    rng: ChaCha8Rng,
}

fn llm_weights(entries: &[ConceptEntry]) -> Vec<f64> {
    entries.iter().map(|e| e.certainty.weight()).collect()
}

impl BatchSampler {
    /// Encodes the target and training lists once and fixes the per-run
    /// certainty weights.
    pub fn new(record: &ConceptRecord, config: &ErasureConfig, encoder: &mut dyn TextEncoder) -> Result<Self, TrainError> {
        config.validate()?;
        let (m, n) = config.effective_mn();
        let corefs = &record.corefs.train;
        let retains = &record.retains.train;
        if config.variant != Variant::CrceSphere && m > corefs.len() {
            return Err(TrainError::SampleSize {
                side: "corefs",
                requested: m,
                available: corefs.len(),
            });
        }
        if n > retains.len() {
            return Err(TrainError::SampleSize {
                side: "retains",
                requested: n,
                available: retains.len(),
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (coref_w, retain_w) = match config.certainty_mode {
            CertaintyMode::Llm => (llm_weights(corefs), llm_weights(retains)),
            CertaintyMode::UniformOne => (vec![1.0; corefs.len()], vec![1.0; retains.len()]),
            CertaintyMode::Noise => {
                let sigma = config.noise_sigma;
                let mut perturb = |w: Vec<f64>| -> Vec<f64> {
                    w.into_iter()
                        .map(|x| {
                            let d = if sigma > 0.0 { rng.random_range(-sigma..=sigma) } else { 0.0 };
                            (x + d).clamp(MIN_NOISY_WEIGHT, 1.0)
                        })
                        .collect()
                };
                match config.noise_side {
                    NoiseSide::Coref => (perturb(llm_weights(corefs)), vec![1.0; retains.len()]),
                    NoiseSide::Retain => (vec![1.0; corefs.len()], perturb(llm_weights(retains))),
                    NoiseSide::Both => {
                        let c = perturb(llm_weights(corefs));
                        (c, perturb(llm_weights(retains)))
                    }
                }
            }
        };

        let mut encode = |entries: &[ConceptEntry], weights: Vec<f64>| -> Result<Vec<Candidate>, TrainError> {
            entries
                .iter()
                .zip(weights)
                .map(|(e, weight)| {
                    Ok(Candidate {
                        id: e.text.clone(),
                        cond: encoder.encode_conditioning(&e.text)?,
                        weight,
                    })
                })
                .collect()
        };
        let coref_c = if config.variant == Variant::CrceSphere {
            Vec::new()
        } else {
            encode(corefs, coref_w)?
        };
        let retain_c = encode(retains, retain_w)?;
        let target_cond = encoder.encode_conditioning(&record.target)?;

        let mut sampler = Self {
            config: config.clone(),
            target_cond,
            corefs: coref_c,
            retains: retain_c,
            fixed: None,
            rng,
        };
        if config.variant == Variant::CrceFixed {
            let c = sampler.draw(sampler.corefs.len(), m);
            let r = sampler.draw(sampler.retains.len(), n);
            sampler.fixed = Some((c, r));
        }
        Ok(sampler)
    }

    fn draw(&mut self, len: usize, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        sample_indices(&mut self.rng, len, k).into_vec()
    }

    /// Short fingerprint of the generator position.
    pub fn rng_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rng.get_seed());
        h.update(self.rng.get_stream().to_le_bytes());
        h.update(self.rng.get_word_pos().to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn target_cond(&self) -> &Tensor {
        &self.target_cond
    }

    /// Next batch; `x_t` is produced by `backend` from `params` conditioned on
    /// the target.
    pub fn sample_batch(&mut self, backend: &dyn DiffusionBackend, params: &[f64]) -> Result<NoiseBatch, TrainError> {
        let (m, n) = self.config.effective_mn();
        let (ci, ri) = match &self.fixed {
            Some((c, r)) => (c.clone(), r.clone()),
            None => {
                let c = if self.config.variant == Variant::CrceSphere {
                    Vec::new()
                } else {
                    self.draw(self.corefs.len(), m)
                };
                let r = self.draw(self.retains.len(), n);
                (c, r)
            }
        };
        let pick = |list: &[Candidate], idx: &[usize]| -> Vec<WeightedCond> {
            idx.iter()
                .map(|&i| WeightedCond {
                    id: list[i].id.clone(),
                    cond: list[i].cond.clone(),
                    weight: list[i].weight,
                })
                .collect()
        };
        let coref_conds = if self.config.variant == Variant::CrceSphere {
            let radius = self.config.sphere_radius.ok_or(ConfigError::SphereRadius)?;
            let centre = self.target_cond.data().to_vec();
            (0..m)
                .map(|i| {
                    let delta = ball_uniform(centre.len(), radius, &mut self.rng);
                    let data = centre.iter().zip(delta).map(|(c, d)| c + d).collect();
                    Ok(WeightedCond {
                        id: format!("sphere[{i}]"),
                        cond: Tensor::new(self.target_cond.shape().to_vec(), data)?,
                        weight: 1.0,
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?
        } else {
            pick(&self.corefs, &ci)
        };
        let retain_conds = pick(&self.retains, &ri);

        let t = self.rng.random_range(0..backend.num_timesteps());
        let latent_seed: u64 = self.rng.random();
        let x_t = backend.generate_latent(params, Some(&self.target_cond), t, latent_seed)?;
        Ok(NoiseBatch {
            x_t,
            t,
            target_cond: self.target_cond.clone(),
            coref_conds,
            retain_conds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub esd: f64,
    pub coref: f64,
    pub retain: f64,
    pub total: f64,
    pub coref_ids: Vec<String>,
    pub retain_ids: Vec<String>,
    pub rng_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { steps })
    }
}

/// Sidecar written next to the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ErasureConfig,
    pub target: String,
    pub dataset_digest: String,
    pub backend: String,
    pub encoder: String,
    pub final_loss: Option<LossBreakdown>,
    pub steps: usize,
    pub rng_digest: String,
    pub weights_digest: String,
    /// One latent and timestep is shared by all three loss terms per step.
    pub shared_latent: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: Vec<f64>,
    pub log: TrainingLog,
    pub manifest: CheckpointManifest,
}

pub fn weights_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn record_digest(record: &ConceptRecord) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(record).expect("record serializes")))
}

/// Fine-tunes a copy of `initial` (which also serves as the frozen model).
pub fn run_training(
    record: &ConceptRecord,
    config: &ErasureConfig,
    backend: &dyn DiffusionBackend,
    encoder: &mut dyn TextEncoder,
    initial: &[f64],
) -> Result<TrainingOutcome, TrainError> {
    config.validate()?;
    if !record.is_approved() || has_errors(&validate_record(record)) {
        return Err(TrainError::InvalidRecord(record.id()));
    }
    if initial.len() != backend.num_params() {
        return Err(BackendError::ParamCount {
            got: initial.len(),
            expected: backend.num_params(),
        }
        .into());
    }
    let mask = apply_param_scope(backend.param_groups(), config.param_scope)?;
    let trainable: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let encoder_id = encoder.encoder_id();
    let mut sampler = BatchSampler::new(record, config, encoder)?;

    let frozen = initial;
    let mut params = initial.to_vec();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, params.len());
    let mut grad = vec![0.0; params.len()];
    let mut log = TrainingLog::default();
    let mut last = None;

    for step in 0..config.iterations {
        let digest = sampler.rng_digest();
        let batch = sampler.sample_batch(backend, &params)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = crce_loss_and_grad(&batch, &params, frozen, backend, config.eta, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                batch: batch.describe(),
            });
        }
        for (g, &m) in grad.iter_mut().zip(&mask) {
            if !m {
                *g = 0.0;
            }
        }
        opt.step(&mut params, &grad, &trainable);
        log.steps.push(StepRecord {
            step,
            t: batch.t,
            esd: loss.esd_term,
            coref: loss.coref_term,
            retain: loss.retain_term,
            total: loss.total,
            coref_ids: batch.coref_ids(),
            retain_ids: batch.retain_ids(),
            rng_digest: digest,
        });
        last = Some(loss);
    }

    let manifest = CheckpointManifest {
        config: config.clone(),
        target: record.target.clone(),
        dataset_digest: record_digest(record),
        backend: backend.backend_id(),
        encoder: encoder_id,
        final_loss: last,
        steps: config.iterations,
        rng_digest: sampler.rng_digest(),
        weights_digest: weights_digest(&params),
        shared_latent: true,
    };
    Ok(TrainingOutcome { params, log, manifest })
}

/// Paths of the three files a checkpoint consists of.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub manifest: PathBuf,
    pub log: PathBuf,
}

impl CheckpointPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            weights: dir.join("weights.bin"),
            manifest: dir.join("manifest.json"),
            log: dir.join("train_log.jsonl"),
        }
    }
}

pub fn write_checkpoint(
    dir: &Path,
    backend: &dyn DiffusionBackend,
    outcome: &TrainingOutcome,
) -> Result<CheckpointPaths, TrainError> {
    let io = |path: &Path, e: &dyn std::fmt::Display| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let paths = CheckpointPaths::in_dir(dir);
    backend.save_weights(&outcome.params, &paths.weights)?;
    let mut manifest = serde_json::to_vec_pretty(&outcome.manifest).expect("manifest serializes");
    manifest.push(b'\n');
    write_atomic(&paths.manifest, &manifest).map_err(|e| io(&paths.manifest, &e))?;
    write_atomic(&paths.log, outcome.log.to_jsonl().as_bytes()).map_err(|e| io(&paths.log, &e))?;
    Ok(paths)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Largest relative error between analytic and central finite-difference
/// gradients over `indices`. Denominators are floored at `1e-6` so
/// parameters with vanishing gradients do not blow up the ratio.
pub fn gradient_check<F>(mut loss_fn: F, analytic: &[f64], params: &[f64], epsilon: f64, indices: &[usize]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + epsilon;
        let plus = loss_fn(&p);
        p[i] = orig - epsilon;
        let minus = loss_fn(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Gradient check of [`crce_loss`] for one batch over `count` random
/// parameters (chosen with `seed`).
#[allow(clippy::too_many_arguments)]
pub fn crce_gradient_check(
    batch: &NoiseBatch,
    tuned: &[f64],
    frozen: &[f64],
    backend: &dyn DiffusionBackend,
    eta: f64,
    epsilon: f64,
    count: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut grad = vec![0.0; tuned.len()];
    crce_loss_and_grad(batch, tuned, frozen, backend, eta, &mut grad)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample_indices(&mut rng, tuned.len(), count.min(tuned.len())).into_vec();
    let loss = |p: &[f64]| crce_loss(batch, p, frozen, backend, eta).map(|l| l.total).unwrap_or(f64::NAN);
    Ok(gradient_check(loss, &grad, tuned, epsilon, &indices))
}
