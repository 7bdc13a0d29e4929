//! A 2-D Gaussian-mixture "world" where each mixture component is a concept
//! and each concept has a name plus alias prompts whose embeddings sit close
//! to the concept's base embedding.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{
    normalize_text, Category, CertaintyLevel, ConceptEntry, ConceptRecord, CorefConceptDataset, RecordState, Split,
};
use crate::embedding::{EmbeddingError, EmbeddingVector, TextEncoder};
use crate::tensor::Tensor;

pub const CONCEPT_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
pub const ALIASES_PER_CONCEPT: usize = 15;

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub means: Vec<[f64; 2]>,
    pub spread: f64,
    pub width: usize,
    bos: Vec<f64>,
    prompts: HashMap<String, (usize, Vec<f64>)>,
}

impl Default for ToyWorld {
    fn default() -> Self {
        Self::new(2024)
    }
}

impl ToyWorld {
    pub fn new(seed: u64) -> Self {
        let width = 8;
        let radius = 2.0;
        let means: Vec<[f64; 2]> = (0..CONCEPT_NAMES.len())
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_2;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
            let v: Vec<f64> = (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n * scale).collect()
        };
        let bos = gaussian(&mut rng, 1.0);
        let mut prompts = HashMap::new();
        for (k, name) in CONCEPT_NAMES.iter().enumerate() {
            let base = gaussian(&mut rng, 1.0);
            for a in 1..=ALIASES_PER_CONCEPT {
                let jitter = gaussian(&mut rng, 0.2);
                let alias: Vec<f64> = base.iter().zip(&jitter).map(|(b, j)| b + j).collect();
                prompts.insert(normalize_text(&alias_name(name, a)), (k, alias));
            }
            prompts.insert(normalize_text(name), (k, base));
        }
        Self {
            means,
            spread: 0.25,
            width,
            bos,
            prompts,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.means.len()
    }

    /// Concept index named by a prompt, if the prompt is known.
    pub fn concept_of(&self, text: &str) -> Option<usize> {
        self.prompts.get(&normalize_text(text)).map(|(k, _)| *k)
    }

    pub fn embedding(&self, text: &str) -> Option<&[f64]> {
        self.prompts.get(&normalize_text(text)).map(|(_, v)| v.as_slice())
    }

    /// Every known prompt of concept `k`: its name followed by its aliases.
    pub fn prompts_of(&self, k: usize) -> Vec<String> {
        let name = CONCEPT_NAMES[k];
        std::iter::once(name.to_string())
            .chain((1..=ALIASES_PER_CONCEPT).map(|a| alias_name(name, a)))
            .collect()
    }

    /// `[bos, token]` conditioning; the empty prompt uses a zero token.
    pub fn conditioning(&self, text: &str) -> Option<Tensor> {
        let token = if text.trim().is_empty() {
            vec![0.0; self.width]
        } else {
            self.embedding(text)?.to_vec()
        };
        let mut data = self.bos.clone();
        data.extend(token);
        Some(Tensor::new(vec![2, self.width], data).expect("2 x width"))
    }

    pub fn null_conditioning(&self) -> Tensor {
        self.conditioning("").expect("empty prompt is always known")
    }

    /// Index of the nearest component mean and the distance to it.
    pub fn nearest(&self, p: [f64; 2]) -> (usize, f64) {
        self.means
            .iter()
            .enumerate()
            .map(|(k, m)| (k, ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one component")
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> [f64; 2] {
        let m = self.means[k];
        [
            m[0] + self.spread * rng.sample::<f64, _>(StandardNormal),
            m[1] + self.spread * rng.sample::<f64, _>(StandardNormal),
        ]
    }

    /// Approved record erasing `alpha`: its 15 aliases as corefs, and the
    /// names and aliases of `beta` and `gamma` as retains.
    pub fn erasure_record(&self) -> ConceptRecord {
        let labels = |n: usize| -> Vec<CertaintyLevel> {
            (0..n).map(|i| CertaintyLevel::ALL[(i * 5) / n]).collect()
        };
        let entries = |texts: Vec<String>, levels: Vec<CertaintyLevel>| -> Vec<ConceptEntry> {
            texts.into_iter().zip(levels).map(|(t, c)| ConceptEntry::new(t, c)).collect()
        };
        let alpha: Vec<String> = self.prompts_of(0).into_iter().skip(1).collect();
        let beta = self.prompts_of(1);
        let gamma = self.prompts_of(2);
        let retain_train: Vec<String> = beta[..5].iter().chain(&gamma[..5]).cloned().collect();
        let retain_test: Vec<String> = beta[5..8].iter().chain(&gamma[5..7]).cloned().collect();
        ConceptRecord {
            target: CONCEPT_NAMES[0].to_string(),
            category: Category::Object,
            disambiguation: None,
            state: RecordState::Approved,
            revision: 0,
            corefs: Split {
                train: entries(alpha[..10].to_vec(), labels(10)),
                test: entries(alpha[10..].to_vec(), labels(5)),
            },
            retains: Split {
                train: entries(retain_train, labels(10)),
                test: entries(retain_test, labels(5)),
            },
        }
    }

    pub fn dataset(&self) -> CorefConceptDataset {
        CorefConceptDataset::new(vec![self.erasure_record()])
    }
}

pub fn alias_name(name: &str, index: usize) -> String {
    format!("{name} variant {index:02}")
}

/// Lookup-table encoder over a [`ToyWorld`]'s prompts.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    world: std::sync::Arc<ToyWorld>,
}

impl ToyEncoder {
    pub fn new(world: std::sync::Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

impl TextEncoder for ToyEncoder {
    fn encoder_id(&self) -> String {
        "toy-lookup-v1".into()
    }

    fn encode_pooled(&mut self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let v = self
            .world
            .embedding(text)
            .ok_or_else(|| EmbeddingError::Encoder(format!("unknown toy prompt {text:?}")))?;
        EmbeddingVector::unit(v.to_vec())
    }

    fn encode_conditioning(&mut self, text: &str) -> Result<Tensor, EmbeddingError> {
        self.world
            .conditioning(text)
            .ok_or_else(|| EmbeddingError::Encoder(format!("unknown toy prompt {text:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_record;

    #[test]
    fn record_is_valid() {
        let w = ToyWorld::default();
        let r = w.erasure_record();
        assert!(validate_record(&r).is_empty(), "{:?}", validate_record(&r));
        for e in r.corefs.iter() {
            assert_eq!(w.concept_of(&e.text), Some(0));
        }
        for e in r.retains.iter() {
            let k = w.concept_of(&e.text).unwrap();
            assert!(k == 1 || k == 2);
        }
    }

    #[test]
    fn aliases_are_close_to_their_concept() {
        let w = ToyWorld::default();
        let mut enc = ToyEncoder::new(std::sync::Arc::new(w.clone()));
        let base = enc.encode_pooled("alpha").unwrap();
        let alias = enc.encode_pooled(&alias_name("alpha", 3)).unwrap();
        let other = enc.encode_pooled("beta").unwrap();
        let near = crate::embedding::cosine_similarity(&base, &alias).unwrap();
        let far = crate::embedding::cosine_similarity(&base, &other).unwrap();
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn unknown_prompt() {
        let mut enc = ToyEncoder::new(std::sync::Arc::new(ToyWorld::default()));
        assert!(enc.encode_pooled("zebra").is_err());
        assert!(enc.encode_pooled("").is_err());
        assert!(enc.encode_conditioning("").is_ok());
    }
}
