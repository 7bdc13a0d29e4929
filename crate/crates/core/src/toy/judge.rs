//! Toy image generator (one sampled 2-D point per "image") and the
//! nearest-component judge.

use std::sync::Arc;

use super::{ToyBackend, ToyWorld};
use crate::eval::{extract_judge_concept, prompt_hash, EvalError, GeneratedImage, ImageGenerator, Judge};

/// Points farther than this from every mean show no recognizable concept.
pub const RECOGNITION_RADIUS: f64 = 1.0;

pub fn encode_point(p: [f64; 2]) -> Vec<u8> {
    let mut b = p[0].to_le_bytes().to_vec();
    b.extend_from_slice(&p[1].to_le_bytes());
    b
}

pub fn decode_point(bytes: &[u8]) -> Option<[f64; 2]> {
    if bytes.len() != 16 {
        return None;
    }
    let x = f64::from_le_bytes(bytes[..8].try_into().ok()?);
    let y = f64::from_le_bytes(bytes[8..].try_into().ok()?);
    Some([x, y])
}

pub struct ToyImageGenerator {
    world: Arc<ToyWorld>,
    backend: Arc<ToyBackend>,
    params: Arc<Vec<f64>>,
    pub guidance: f64,
}

impl ToyImageGenerator {
    pub fn new(world: Arc<ToyWorld>, backend: Arc<ToyBackend>, params: Arc<Vec<f64>>) -> Self {
        Self {
            world,
            backend,
            params,
            guidance: 1.0,
        }
    }
}

impl ImageGenerator for ToyImageGenerator {
    fn generator_id(&self) -> String {
        "toy-points".into()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage, EvalError> {
        let cond = self
            .world
            .conditioning(prompt)
            .ok_or_else(|| EvalError::Generation(format!("unknown toy prompt {prompt:?}")))?;
        let pts = self
            .backend
            .sample(&self.params, Some(&cond), 1, self.guidance, seed)
            .map_err(|e| EvalError::Generation(e.to_string()))?;
        Ok(GeneratedImage {
            id: format!("{}/{seed}", prompt_hash(prompt)),
            bytes: encode_point(pts[0]),
        })
    }
}

/// Answers "yes" iff the point's nearest mixture component is the one the
/// asked-about concept names and the point lies within
/// [`RECOGNITION_RADIUS`] of it.
pub struct ToyJudge {
    world: Arc<ToyWorld>,
}

impl ToyJudge {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

impl Judge for ToyJudge {
    fn judge_id(&self) -> String {
        "toy-nearest-component".into()
    }

    fn judge(&self, image: &[u8], prompt: &str) -> Result<String, EvalError> {
        let concept = extract_judge_concept(prompt).ok_or_else(|| EvalError::Judge {
            message: "instruction does not follow the judge template".into(),
            retryable: false,
        })?;
        let wanted = self.world.concept_of(&concept).ok_or_else(|| EvalError::Judge {
            message: format!("unknown concept {concept:?}"),
            retryable: false,
        })?;
        let p = decode_point(image).ok_or_else(|| EvalError::Judge {
            message: "image is not a toy point".into(),
            retryable: false,
        })?;
        let (k, d) = self.world.nearest(p);
        Ok(if k == wanted && d <= RECOGNITION_RADIUS {
            format!("Yes, the image shows {concept}.")
        } else {
            "No.".to_string()
        })
    }
}
