//! Offline stand-in for a text-to-image model: a conditional denoiser over a
//! 2-D Gaussian mixture, a lookup encoder, and a nearest-component judge.

mod denoiser;
mod judge;
mod world;

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use denoiser::{ToyBackend, ToyConfig};
pub use judge::{ToyImageGenerator, ToyJudge};
pub use world::{alias_name, ToyEncoder, ToyWorld, ALIASES_PER_CONCEPT, CONCEPT_NAMES};

use crate::backend::DiffusionBackend;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Probability of dropping the prompt (classifier-free training).
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 64,
            learning_rate: 3e-3,
            p_uncond: 0.15,
            seed: 7,
        }
    }
}

/// Trains the base ("original") model on the mixture. Deterministic in
/// `config.seed`.
pub fn pretrain(world: &ToyWorld, backend: &ToyBackend, config: &PretrainConfig) -> Vec<f64> {
    let mut params = backend.init_params(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let all: Vec<usize> = (0..params.len()).collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate, params.len());
    let prompts: Vec<Vec<String>> = (0..world.num_concepts()).map(|k| world.prompts_of(k)).collect();
    let conds: Vec<Vec<Tensor>> = prompts
        .iter()
        .map(|ps| ps.iter().map(|p| world.conditioning(p).expect("known prompt")).collect())
        .collect();
    let steps = backend.num_timesteps();
    let mut grad = vec![0.0; params.len()];

    for step in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..config.batch {
            let k = rng.random_range(0..world.num_concepts());
            let x0 = world.sample_point(k, &mut rng);
            let t = rng.random_range(0..steps);
            let eps = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let xt = Tensor::new(vec![1, 2], backend.noisy(&x0, &eps, t)).expect("1x2");
            let cond = if rng.random::<f64>() < config.p_uncond {
                None
            } else {
                let i = rng.random_range(0..conds[k].len());
                Some(&conds[k][i])
            };
            let pred = backend.predict_noise(&params, &xt, t, cond).expect("valid toy input");
            let scale = 2.0 / config.batch as f64;
            let up = Tensor::new(
                vec![1, 2],
                vec![scale * (pred.data()[0] - eps[0]), scale * (pred.data()[1] - eps[1])],
            )
            .expect("1x2");
            backend
                .accumulate_grad(&params, &xt, t, cond, &up, &mut grad)
                .expect("valid toy input");
        }
        // cosine decay keeps the end of training stable
        let frac = step as f64 / config.steps.max(1) as f64;
        if let Optimizer::Adam { lr, .. } = &mut opt {
            *lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()).max(0.02);
        }
        opt.step(&mut params, &grad, &all);
    }
    params
}

/// World, backend and pretrained base weights bundled together.
#[derive(Debug, Clone)]
pub struct ToySetup {
    pub world: Arc<ToyWorld>,
    pub backend: Arc<ToyBackend>,
    pub base_params: Arc<Vec<f64>>,
}

impl ToySetup {
    pub fn build(world: ToyWorld, config: ToyConfig, pretrain_config: &PretrainConfig) -> Self {
        let backend = ToyBackend::new(config, world.null_conditioning());
        let params = pretrain(&world, &backend, pretrain_config);
        Self {
            world: Arc::new(world),
            backend: Arc::new(backend),
            base_params: Arc::new(params),
        }
    }

    /// Backend and world without pretraining, for callers that load weights.
    pub fn untrained(world: ToyWorld, config: ToyConfig) -> (Arc<ToyWorld>, Arc<ToyBackend>) {
        let backend = ToyBackend::new(config, world.null_conditioning());
        (Arc::new(world), Arc::new(backend))
    }

    /// Process-wide default setup, pretrained once on first use.
    pub fn shared() -> &'static ToySetup {
        static SETUP: OnceLock<ToySetup> = OnceLock::new();
        SETUP.get_or_init(|| ToySetup::build(ToyWorld::default(), ToyConfig::default(), &PretrainConfig::default()))
    }

    pub fn encoder(&self) -> ToyEncoder {
        ToyEncoder::new(self.world.clone())
    }

    pub fn judge(&self) -> ToyJudge {
        ToyJudge::new(self.world.clone())
    }

    pub fn generator(&self, params: Arc<Vec<f64>>) -> ToyImageGenerator {
        ToyImageGenerator::new(self.world.clone(), self.backend.clone(), params)
    }
}
