//! The CorefConcept data model: certainty levels, concept records, and the
//! JSON dataset file.
//!
//! Certainty is stored as its label and converted to a loss weight on read,
//! so dataset files stay human-editable.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dataset schema version written by [`save_dataset`].
pub const SCHEMA_VERSION: &str = "1.0";

/// Number of training entries per side of an approved record.
pub const TRAIN_LEN: usize = 10;
/// Number of held-out entries per side of an approved record.
pub const TEST_LEN: usize = 5;
/// Size of the candidate pool the LLM proposes per side.
pub const POOL_LEN: usize = TRAIN_LEN + TEST_LEN;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown certainty label {0:?}; expected one of Very High, High, Normal, Low, Very Low")]
    UnknownCertainty(String),
    #[error("failed to parse dataset at {path}: {message} (line {line}, column {column})")]
    Parse {
        path: String,
        message: String,
        line: usize,
        column: usize,
    },
    #[error("unsupported dataset schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no record for target {0:?}")]
    UnknownTarget(String),
}

/// Ordinal confidence assigned by the LLM to a coref or retain entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CertaintyLevel {
    VeryHigh,
    High,
    Normal,
    Low,
    VeryLow,
}

impl CertaintyLevel {
    /// All levels from most to least certain.
    pub const ALL: [CertaintyLevel; 5] = [
        CertaintyLevel::VeryHigh,
        CertaintyLevel::High,
        CertaintyLevel::Normal,
        CertaintyLevel::Low,
        CertaintyLevel::VeryLow,
    ];

    /// Loss weight for this level.
    pub fn weight(self) -> f64 {
        match self {
            CertaintyLevel::VeryHigh => 1.0,
            CertaintyLevel::High => 0.8,
            CertaintyLevel::Normal => 0.6,
            CertaintyLevel::Low => 0.4,
            CertaintyLevel::VeryLow => 0.2,
        }
    }

    /// Canonical label, as written to dataset files.
    pub fn label(self) -> &'static str {
        match self {
            CertaintyLevel::VeryHigh => "Very High",
            CertaintyLevel::High => "High",
            CertaintyLevel::Normal => "Normal",
            CertaintyLevel::Low => "Low",
            CertaintyLevel::VeryLow => "Very Low",
        }
    }
}

impl fmt::Display for CertaintyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CertaintyLevel {
    type Err = DatasetError;

    /// Tolerant parse: case, surrounding whitespace, and `_`/`-` separators
    /// are ignored ("very_high", "VERY HIGH" and "Very High" all match).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .trim()
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        match folded.as_str() {
            "veryhigh" => Ok(CertaintyLevel::VeryHigh),
            "high" => Ok(CertaintyLevel::High),
            "normal" => Ok(CertaintyLevel::Normal),
            "low" => Ok(CertaintyLevel::Low),
            "verylow" => Ok(CertaintyLevel::VeryLow),
            _ => Err(DatasetError::UnknownCertainty(s.to_string())),
        }
    }
}

impl Serialize for CertaintyLevel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for CertaintyLevel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps a certainty label to its loss weight.
pub fn certainty_to_weight(label: &str) -> Result<f64, DatasetError> {
    label.parse::<CertaintyLevel>().map(CertaintyLevel::weight)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub text: String,
    pub certainty: CertaintyLevel,
}

impl ConceptEntry {
    pub fn new(text: impl Into<String>, certainty: CertaintyLevel) -> Self {
        Self {
            text: text.into(),
            certainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Ip,
    Celebrity,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Object => "object",
            Category::Ip => "ip",
            Category::Celebrity => "celebrity",
        })
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "object" => Ok(Category::Object),
            "ip" | "intellectual property" => Ok(Category::Ip),
            "celebrity" => Ok(Category::Celebrity),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordState {
    #[default]
    Draft,
    Approved,
}

/// Train/test halves of one side (corefs or retains) of a record.
///
/// A draft may keep its whole 15-entry candidate pool in `train` with an
/// empty `test` until it is split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<ConceptEntry>,
    pub test: Vec<ConceptEntry>,
}

impl Split {
    pub fn iter(&self) -> impl Iterator<Item = &ConceptEntry> {
        self.train.iter().chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Coref,
    Retain,
}

impl Side {
    pub fn key(self) -> &'static str {
        match self {
            Side::Coref => "corefs",
            Side::Retain => "retains",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Test,
}

impl Part {
    pub fn key(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Test => "test",
        }
    }
}

/// One erasure target with its coref and retain lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub target: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disambiguation: Option<String>,
    #[serde(default)]
    pub state: RecordState,
    #[serde(default)]
    pub revision: u64,
    pub corefs: Split,
    pub retains: Split,
}

impl ConceptRecord {
    pub fn side(&self, side: Side) -> &Split {
        match side {
            Side::Coref => &self.corefs,
            Side::Retain => &self.retains,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Split {
        match side {
            Side::Coref => &mut self.corefs,
            Side::Retain => &mut self.retains,
        }
    }

    pub fn list(&self, side: Side, part: Part) -> &Vec<ConceptEntry> {
        let split = self.side(side);
        match part {
            Part::Train => &split.train,
            Part::Test => &split.test,
        }
    }

    pub fn list_mut(&mut self, side: Side, part: Part) -> &mut Vec<ConceptEntry> {
        let split = self.side_mut(side);
        match part {
            Part::Train => &mut split.train,
            Part::Test => &mut split.test,
        }
    }

    /// Stable URL-safe identifier: the slugged target, plus the slugged
    /// disambiguation when present.
    pub fn id(&self) -> String {
        record_id(&self.target, self.disambiguation.as_deref())
    }

    pub fn is_approved(&self) -> bool {
        self.state == RecordState::Approved
    }
}

pub fn record_id(target: &str, disambiguation: Option<&str>) -> String {
    let mut id = slug(target);
    if let Some(d) = disambiguation {
        id.push_str("--");
        id.push_str(&slug(d));
    }
    id
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for c in s.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            out.push(c);
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// Equality key for prompt strings: lowercase, punctuation dropped,
/// whitespace collapsed.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    ListLength,
    PoolSize,
    SetOverlap,
    Duplicate,
    EmptyText,
    TargetInRetain,
    NonMonotone,
    UnknownCertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// A broken invariant, reported as data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
    pub message: String,
    pub severity: Severity,
}

impl Violation {
    pub fn error(code: ViolationCode, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code,
            path: path.into(),
            message: message.into(),
            severity: Severity::Error,
        }
    }

    pub fn warning(code: ViolationCode, path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code,
            path: path.into(),
            message: message.into(),
            severity: Severity::Warning,
        }
    }
}

fn list_path(side: Side, part: Part) -> String {
    format!("{}.{}", side.key(), part.key())
}

/// Checks every record invariant under the record's own state.
///
/// Returns an empty list iff the record is well-formed. Ordering of
/// certainty labels is not a record invariant; see [`ordering_warnings`].
pub fn validate_record(record: &ConceptRecord) -> Vec<Violation> {
    validate_record_as(record, record.state)
}

/// Validates `record` as if it were in `state`; used to gate approval.
pub fn validate_record_as(record: &ConceptRecord, state: RecordState) -> Vec<Violation> {
    let mut out = Vec::new();

    for side in [Side::Coref, Side::Retain] {
        let split = record.side(side);
        match state {
            RecordState::Approved => {
                for (part, want) in [(Part::Train, TRAIN_LEN), (Part::Test, TEST_LEN)] {
                    let got = record.list(side, part).len();
                    if got != want {
                        out.push(Violation::error(
                            ViolationCode::ListLength,
                            list_path(side, part),
                            format!("expected {want} entries, found {got}"),
                        ));
                    }
                }
            }
            RecordState::Draft => {
                if split.len() > POOL_LEN {
                    out.push(Violation::error(
                        ViolationCode::PoolSize,
                        side.key(),
                        format!("draft holds {} entries, more than the {POOL_LEN}-entry pool", split.len()),
                    ));
                }
            }
        }

        for part in [Part::Train, Part::Test] {
            for (i, entry) in record.list(side, part).iter().enumerate() {
                if entry.text.trim().is_empty() {
                    out.push(Violation::error(
                        ViolationCode::EmptyText,
                        format!("{}[{i}]", list_path(side, part)),
                        "entry text is empty",
                    ));
                }
            }
        }

        let mut seen: HashMap<String, String> = HashMap::new();
        for part in [Part::Train, Part::Test] {
            for (i, entry) in record.list(side, part).iter().enumerate() {
                let key = normalize_text(&entry.text);
                if key.is_empty() {
                    continue;
                }
                let path = format!("{}[{i}]", list_path(side, part));
                if let Some(first) = seen.get(&key) {
                    out.push(Violation::error(
                        ViolationCode::Duplicate,
                        path,
                        format!("{:?} duplicates {first}", entry.text),
                    ));
                } else {
                    seen.insert(key, path);
                }
            }
        }
    }

    let coref_keys: HashMap<String, String> = [Part::Train, Part::Test]
        .into_iter()
        .flat_map(|part| {
            record
                .list(Side::Coref, part)
                .iter()
                .enumerate()
                .map(move |(i, e)| (normalize_text(&e.text), format!("{}[{i}]", list_path(Side::Coref, part))))
        })
        .collect();
    let target_key = normalize_text(&record.target);
    for part in [Part::Train, Part::Test] {
        for (i, entry) in record.list(Side::Retain, part).iter().enumerate() {
            let key = normalize_text(&entry.text);
            let path = format!("{}[{i}]", list_path(Side::Retain, part));
            if !key.is_empty() && key == target_key {
                out.push(Violation::error(
                    ViolationCode::TargetInRetain,
                    path.clone(),
                    format!("retain {:?} is the erasure target", entry.text),
                ));
            }
            if let Some(coref_path) = coref_keys.get(&key) {
                if !key.is_empty() {
                    out.push(Violation::error(
                        ViolationCode::SetOverlap,
                        path,
                        format!("{:?} is both a retain and a coref ({coref_path})", entry.text),
                    ));
                }
            }
        }
    }

    out
}

/// Warnings for lists whose certainty increases somewhere down the list.
pub fn ordering_warnings(record: &ConceptRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    for side in [Side::Coref, Side::Retain] {
        for part in [Part::Train, Part::Test] {
            out.extend(monotone_violations(record.list(side, part), &list_path(side, part)));
        }
    }
    out
}

/// Flags every index whose weight exceeds the weight of the entry before it.
pub fn monotone_violations(list: &[ConceptEntry], path: &str) -> Vec<Violation> {
    list.windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].certainty.weight() > w[0].certainty.weight())
        .map(|(i, w)| {
            Violation::warning(
                ViolationCode::NonMonotone,
                format!("{path}[{}]", i + 1),
                format!("{:?} ({}) follows a less certain entry ({})", w[1].text, w[1].certainty, w[0].certainty),
            )
        })
        .collect()
}

pub fn has_errors(violations: &[Violation]) -> bool {
    violations.iter().any(|v| v.severity == Severity::Error)
}

/// The whole dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefConceptDataset {
    pub version: String,
    pub concepts: Vec<ConceptRecord>,
}

impl Default for CorefConceptDataset {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION.to_string(),
            concepts: Vec::new(),
        }
    }
}

impl CorefConceptDataset {
    pub fn new(concepts: Vec<ConceptRecord>) -> Self {
        Self {
            version: SCHEMA_VERSION.to_string(),
            concepts,
        }
    }

    /// Looks a record up by id, or by target when the target is unambiguous.
    pub fn find(&self, key: &str) -> Result<&ConceptRecord, DatasetError> {
        self.position(key).map(|i| &self.concepts[i])
    }

    pub fn find_mut(&mut self, key: &str) -> Result<&mut ConceptRecord, DatasetError> {
        let i = self.position(key)?;
        Ok(&mut self.concepts[i])
    }

    fn position(&self, key: &str) -> Result<usize, DatasetError> {
        if let Some(i) = self.concepts.iter().position(|r| r.id() == key) {
            return Ok(i);
        }
        let norm = normalize_text(key);
        let hits: Vec<usize> = self
            .concepts
            .iter()
            .enumerate()
            .filter(|(_, r)| normalize_text(&r.target) == norm)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            _ => Err(DatasetError::UnknownTarget(key.to_string())),
        }
    }

    /// Violations of dataset-level invariants: duplicate (target, disambiguation) pairs.
    pub fn duplicate_targets(&self) -> Vec<Violation> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for (i, r) in self.concepts.iter().enumerate() {
            let key = (normalize_text(&r.target), r.disambiguation.as_deref().map(normalize_text));
            if let Some(first) = seen.insert(key, i) {
                out.push(Violation::error(
                    ViolationCode::Duplicate,
                    format!("concepts[{i}]"),
                    format!("target {:?} already defined at concepts[{first}]", r.target),
                ));
            }
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let bytes = to_canonical_bytes(self);
        hex::encode(Sha256::digest(bytes))
    }
}

fn to_canonical_bytes(dataset: &CorefConceptDataset) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(dataset).expect("dataset serializes");
    bytes.push(b'\n');
    bytes
}

/// Parses a dataset from JSON text. `origin` is only used in diagnostics.
pub fn parse_dataset(text: &str, origin: &str) -> Result<CorefConceptDataset, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let dataset: CorefConceptDataset = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        DatasetError::Parse {
            path: format!("{origin}: {path}"),
            message: inner.to_string(),
            line: inner.line(),
            column: inner.column(),
        }
    })?;
    let major = |v: &str| v.split('.').next().map(str::to_string);
    if major(&dataset.version) != major(SCHEMA_VERSION) {
        return Err(DatasetError::SchemaVersion {
            found: dataset.version,
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<CorefConceptDataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, &path.display().to_string())
}

/// Writes the dataset atomically (temp file in the same directory, then rename).
pub fn save_dataset(dataset: &CorefConceptDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_atomic(path.as_ref(), &to_canonical_bytes(dataset))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// The four example records (Horse, bat (animal), Katniss Everdeen, Tom Cruise)
/// shipped with the crate.
pub fn sample_dataset() -> CorefConceptDataset {
    parse_dataset(include_str!("../data/coref_concept_sample.json"), "coref_concept_sample.json")
        .expect("bundled sample dataset parses")
}
