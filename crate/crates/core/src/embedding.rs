//! Text-embedding geometry: pooled prompt embeddings, cosine/Euclidean
//! distance reports, and ball-uniform sampling around a conditioning.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CertaintyLevel, ConceptRecord, Side};
use crate::tensor::Tensor;

/// Tolerance on `| ‖v‖ − 1 |` for vectors flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Tolerance of the per-row `d = √(2(1−s))` check in distance reports.
pub const ROW_IDENTITY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("prompt is {tokens} tokens, encoder limit is {limit}")]
    TokenLimit { tokens: usize, limit: usize },
    #[error("prompt text is empty")]
    EmptyText,
    #[error("sphere radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw values; `normalized` is false.
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes `values`.
    pub fn unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<(), EmbeddingError> {
    if u.dim() != v.dim() {
        return Err(EmbeddingError::DimensionMismatch(u.dim(), v.dim()));
    }
    Ok(())
}

/// `u·v / (‖u‖‖v‖)`, clamped to [−1, 1].
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    check_dims(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn euclidean_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    check_dims(u, v)?;
    Ok(u.values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Euclidean distance between unit vectors with the given cosine similarity.
pub fn unit_distance_from_cosine(cosine: f64) -> f64 {
    (2.0 * (1.0 - cosine)).max(0.0).sqrt()
}

/// How a per-token encoder output is reduced to a single analysis vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final-layer state at the end-of-sequence token.
    #[default]
    Eos,
    /// Mean of final-layer states over the real (unpadded) tokens.
    MeanTokens,
}

/// A text encoder that yields pooled analysis embeddings and per-token
/// conditioning sequences from the same weights.
///
/// Implementations hold model state and are driven from one thread at a time;
/// share them through [`SharedEncoder`].
pub trait TextEncoder: Send {
    /// Identifies the weights (used as the embedding-cache key).
    fn encoder_id(&self) -> String;

    /// L2-normalized pooled embedding of a non-empty prompt.
    fn encode_pooled(&mut self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    /// Per-token conditioning sequence, shape `[tokens, width]`. The empty
    /// prompt yields the unconditional sequence.
    fn encode_conditioning(&mut self, text: &str) -> Result<Tensor, EmbeddingError>;
}

/// Serializes access to an encoder across threads.
#[derive(Clone)]
pub struct SharedEncoder {
    inner: Arc<Mutex<Box<dyn TextEncoder>>>,
}

impl SharedEncoder {
    pub fn new(encoder: impl TextEncoder + 'static) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Box::new(encoder))),
        }
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut dyn TextEncoder) -> R) -> R {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        f(guard.as_mut())
    }
}

impl TextEncoder for SharedEncoder {
    fn encoder_id(&self) -> String {
        self.with(|e| e.encoder_id())
    }

    fn encode_pooled(&mut self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.with(|e| e.encode_pooled(text))
    }

    fn encode_conditioning(&mut self, text: &str) -> Result<Tensor, EmbeddingError> {
        self.with(|e| e.encode_conditioning(text))
    }
}

/// Pooled embeddings keyed by (encoder id, text), persisted as JSON.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    #[serde(skip)]
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    /// Cache file that lives beside a dataset file.
    pub fn path_for_dataset(dataset: &Path) -> PathBuf {
        let mut name = dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        name.push_str(".embeddings.json");
        dataset.with_file_name(name)
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let path = path.into();
        let mut cache = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| EmbeddingError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| EmbeddingError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
        } else {
            EmbeddingCache::default()
        };
        cache.path = Some(path);
        Ok(cache)
    }

    pub fn get(&self, encoder: &str, text: &str) -> Option<EmbeddingVector> {
        self.entries
            .get(encoder)
            .and_then(|m| m.get(text))
            .map(|v| EmbeddingVector {
                values: v.clone(),
                normalized: true,
            })
    }

    pub fn insert(&mut self, encoder: &str, text: &str, v: &EmbeddingVector) {
        self.entries
            .entry(encoder.to_string())
            .or_default()
            .insert(text.to_string(), v.values.clone());
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> Result<(), EmbeddingError> {
        let Some(path) = &self.path else { return Ok(()) };
        let bytes = serde_json::to_vec(self).expect("cache serializes");
        crate::dataset::write_atomic(path, &bytes).map_err(|e| EmbeddingError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Returns the cached pooled embedding or encodes and caches it.
    pub fn pooled(&mut self, encoder: &mut dyn TextEncoder, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let id = encoder.encoder_id();
        if let Some(v) = self.get(&id, text) {
            return Ok(v);
        }
        let v = encoder.encode_pooled(text)?;
        self.insert(&id, text, &v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Coref,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub group: Group,
    pub text: String,
    pub certainty: Option<CertaintyLevel>,
    pub cosine: f64,
    pub euclidean: f64,
    pub identity_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub target: String,
    pub encoder: String,
    pub rows: Vec<DistanceRow>,
}

impl DistanceReport {
    /// Sorts by group (corefs first), then by descending cosine.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.group
                .cmp(&b.group)
                .then(b.cosine.partial_cmp(&a.cosine).unwrap_or(std::cmp::Ordering::Equal))
        });
    }

    pub fn all_identities_hold(&self) -> bool {
        self.rows.iter().all(|r| r.identity_ok)
    }

    pub fn row(&self, text: &str) -> Option<&DistanceRow> {
        self.rows.iter().find(|r| r.text == text)
    }

    /// CSV with columns `group,text,certainty,cosine,euclidean,identity_ok`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "text", "certainty", "cosine", "euclidean", "identity_ok"])
            .expect("in-memory write");
        for r in &self.rows {
            let group = match r.group {
                Group::Coref => "coref",
                Group::Retain => "retain",
            };
            w.write_record([
                group,
                &r.text,
                r.certainty.map(|c| c.label()).unwrap_or(""),
                &format!("{:.4}", r.cosine),
                &format!("{:.4}", r.euclidean),
                if r.identity_ok { "true" } else { "false" },
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Builds one row per coref/retain entry of `record` (train and test),
/// measured against the pooled embedding of `target`.
pub fn distance_report(
    target: &str,
    record: &ConceptRecord,
    encoder: &mut dyn TextEncoder,
    cache: Option<&mut EmbeddingCache>,
) -> Result<DistanceReport, EmbeddingError> {
    let mut items = Vec::new();
    for (side, group) in [(Side::Coref, Group::Coref), (Side::Retain, Group::Retain)] {
        for entry in record.side(side).iter() {
            items.push((group, entry.text.as_str(), Some(entry.certainty)));
        }
    }
    distance_report_for(target, &items, encoder, cache)
}

/// Like [`distance_report`] over an explicit list of `(group, text, certainty)`.
pub fn distance_report_for(
    target: &str,
    items: &[(Group, &str, Option<CertaintyLevel>)],
    encoder: &mut dyn TextEncoder,
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<DistanceReport, EmbeddingError> {
    let encoder_id = encoder.encoder_id();
    let mut pooled = |text: &str| match cache.as_deref_mut() {
        Some(c) => c.pooled(encoder, text),
        None => encoder.encode_pooled(text),
    };
    let anchor = pooled(target)?;
    let mut rows = Vec::new();
    for &(group, text, certainty) in items {
        let v = pooled(text)?;
        rows.push(distance_row(&anchor, &v, group, text, certainty)?);
    }
    let mut report = DistanceReport {
        target: target.to_string(),
        encoder: encoder_id,
        rows,
    };
    report.sort();
    Ok(report)
}

/// Allowed deviation of a reproduced cosine from the published value.
pub const REFERENCE_COSINE_TOLERANCE: f64 = 0.01;
/// Allowed deviation of a reproduced Euclidean distance from the published value.
pub const REFERENCE_EUCLIDEAN_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub group: Group,
    pub text: String,
    pub cosine: f64,
    pub euclidean: f64,
}

/// Published distances of a target to its corefs and retains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub target: String,
    pub rows: Vec<ReferenceRow>,
}

impl ReferenceTable {
    /// "dog" against 15 corefs and 15 retains, as published for the SD v1.4
    /// text encoder.
    pub fn dog() -> Self {
        serde_json::from_str(include_str!("../data/dog_distances.json")).expect("bundled table parses")
    }

    pub fn row(&self, text: &str) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.text == text)
    }

    /// Recomputes the table with `encoder`.
    pub fn reproduce(
        &self,
        encoder: &mut dyn TextEncoder,
        cache: Option<&mut EmbeddingCache>,
    ) -> Result<DistanceReport, EmbeddingError> {
        let items: Vec<(Group, &str, Option<CertaintyLevel>)> =
            self.rows.iter().map(|r| (r.group, r.text.as_str(), None)).collect();
        distance_report_for(&self.target, &items, encoder, cache)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub text: String,
    pub expected_cosine: f64,
    pub cosine: Option<f64>,
    pub expected_euclidean: f64,
    pub euclidean: Option<f64>,
    pub ok: bool,
}

/// Row-by-row comparison of a reproduced report against a reference table.
pub fn compare_with_reference(report: &DistanceReport, reference: &ReferenceTable) -> Vec<ReferenceCheck> {
    reference
        .rows
        .iter()
        .map(|r| {
            let got = report.row(&r.text);
            let cosine = got.map(|g| g.cosine);
            let euclidean = got.map(|g| g.euclidean);
            let ok = cosine.is_some_and(|c| (c - r.cosine).abs() <= REFERENCE_COSINE_TOLERANCE)
                && euclidean.is_some_and(|d| (d - r.euclidean).abs() <= REFERENCE_EUCLIDEAN_TOLERANCE);
            ReferenceCheck {
                text: r.text.clone(),
                expected_cosine: r.cosine,
                cosine,
                expected_euclidean: r.euclidean,
                euclidean,
                ok,
            }
        })
        .collect()
}

/// True when the listed texts appear in `report` in strictly increasing
/// Euclidean distance.
pub fn euclidean_order_holds(report: &DistanceReport, texts: &[&str]) -> bool {
    let d: Option<Vec<f64>> = texts.iter().map(|t| report.row(t).map(|r| r.euclidean)).collect();
    d.is_some_and(|d| d.windows(2).all(|w| w[0] < w[1]))
}

pub fn distance_row(
    anchor: &EmbeddingVector,
    v: &EmbeddingVector,
    group: Group,
    text: &str,
    certainty: Option<CertaintyLevel>,
) -> Result<DistanceRow, EmbeddingError> {
    let cosine = cosine_similarity(anchor, v)?;
    let euclidean = euclidean_distance(anchor, v)?;
    let unit = anchor.is_normalized() && v.is_normalized();
    let identity_ok = !unit || (euclidean - unit_distance_from_cosine(cosine)).abs() < ROW_IDENTITY_TOLERANCE;
    Ok(DistanceRow {
        group,
        text: text.to_string(),
        certainty,
        cosine,
        euclidean,
        identity_ok,
    })
}

/// Draws `center + δ` with `δ` uniform in the L2 ball of the given radius.
/// The result is not renormalized.
pub fn sphere_sample<R: Rng + ?Sized>(
    center: &EmbeddingVector,
    radius: f64,
    rng: &mut R,
) -> Result<EmbeddingVector, EmbeddingError> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(EmbeddingError::NonPositiveRadius(radius));
    }
    let d = center.dim();
    if d == 0 {
        return Ok(center.clone());
    }
    let delta = ball_uniform(d, radius, rng);
    Ok(EmbeddingVector::new(
        center.values.iter().zip(delta).map(|(c, x)| c + x).collect(),
    ))
}

/// Uniform sample from the `d`-dimensional L2 ball: Gaussian direction,
/// radius scaled by `u^(1/d)`.
pub(crate) fn ball_uniform<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2(&g);
        if n > 0.0 {
            let u: f64 = rng.random();
            let r = radius * u.powf(1.0 / d as f64);
            return g.into_iter().map(|x| x / n * r).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::unit(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let e1 = unit(&[1.0, 0.0, 0.0]);
        let e2 = unit(&[0.0, 1.0, 0.0]);
        assert_eq!(cosine_similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn sixty_degrees() {
        let angle = std::f64::consts::PI / 3.0;
        let u = unit(&[1.0, 0.0]);
        let v = unit(&[angle.cos(), angle.sin()]);
        let direct = u.values()[0] * v.values()[0] + u.values()[1] * v.values()[1];
        let c = cosine_similarity(&u, &v).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
        assert!((c - direct).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = EmbeddingVector::new(vec![1.0, 2.0]);
        let b = EmbeddingVector::new(vec![1.0]);
        assert!(matches!(cosine_similarity(&a, &b), Err(EmbeddingError::DimensionMismatch(2, 1))));
        assert!(matches!(euclidean_distance(&a, &b), Err(EmbeddingError::DimensionMismatch(2, 1))));
        let z = EmbeddingVector::new(vec![0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &z), Err(EmbeddingError::ZeroVector)));
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn printed_cosines_map_to_printed_distances() {
        assert!((unit_distance_from_cosine(0.9122) - 0.4190).abs() < 1e-3);
        assert!((unit_distance_from_cosine(0.9199) - 0.40025).abs() < 1e-4);
    }

    #[test]
    fn sphere_radius_guard() {
        let c = EmbeddingVector::new(vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sphere_sample(&c, 0.0, &mut rng).is_err());
        assert!(sphere_sample(&c, -1.0, &mut rng).is_err());
        let s = sphere_sample(&c, 1e-9, &mut rng).unwrap();
        assert!(s.norm() <= 1e-9);
        assert!(!s.is_normalized());
    }

    #[test]
    fn sphere_is_seeded() {
        let c = unit(&[1.0, 2.0, 3.0]);
        let a = sphere_sample(&c, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sphere_sample(&c, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_layout() {
        let report = DistanceReport {
            target: "dog".into(),
            encoder: "x".into(),
            rows: vec![DistanceRow {
                group: Group::Retain,
                text: "cat".into(),
                certainty: Some(CertaintyLevel::High),
                cosine: 0.9122,
                euclidean: 0.4190,
                identity_ok: true,
            }],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("group,text,certainty,cosine,euclidean,identity_ok"));
        assert_eq!(lines.next(), Some("retain,cat,High,0.9122,0.4190,true"));
    }
}
