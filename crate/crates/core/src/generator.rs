//! LLM-driven generation of coref and retain pools: prompt templating,
//! response parsing, pool validation, train/test splitting and multi-round
//! refinement sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    normalize_text, Category, CertaintyLevel, ConceptEntry, ConceptRecord, RecordState, Split, Violation, ViolationCode,
    POOL_LEN, TRAIN_LEN,
};
use crate::http::{ChatTransport, EndpointConfig, TransportError};

pub const TASK_INSTRUCTION: &str = include_str!("../data/prompts/task_instruction.txt");
pub const CERTAINTY_CRITERIA: &str = include_str!("../data/prompts/certainty_criteria.txt");

const RESPONSE_FORMAT: &str = r#"Reply with JSON only, in this shape:
{"senses": [{"sense": "<meaning, or null if unambiguous>",
             "corefs": [{"text": "...", "certainty": "Very High"}, ...],
             "retains": [{"text": "...", "certainty": "Very High"}, ...]}]}
Give exactly 15 corefs and 15 retains per sense, ordered from most to least certain."#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error("target concept is empty")]
    EmptyTarget,
    #[error("feedback is empty")]
    EmptyFeedback,
    #[error("could not parse LLM response: {message}")]
    Parse { message: String, raw: String },
    #[error("pool has {got} entries, expected {expected}")]
    PoolSize { got: usize, expected: usize },
    #[error("proposal has unknown certainty labels: {0:?}")]
    UnknownCertainty(Vec<String>),
    #[error("LLM client failed: {0}")]
    Client(#[from] ClientError),
    #[error("fixture file {path}: {message}")]
    Fixtures { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ClientError {
    pub message: String,
    pub retryable: bool,
    pub attempts: u32,
}

impl From<TransportError> for ClientError {
    fn from(e: TransportError) -> Self {
        Self {
            message: e.to_string(),
            retryable: e.retryable,
            attempts: e.attempts,
        }
    }
}

fn category_label(category: Category) -> &'static str {
    match category {
        Category::Object => "Object",
        Category::Ip => "Intellectual Property (IP)",
        Category::Celebrity => "Celebrity",
    }
}

/// Task instruction, certainty criteria, and the request naming the target.
pub fn build_generation_prompt(target: &str, category: Category) -> Result<Vec<ChatMessage>, GenerationError> {
    let target = target.trim();
    if target.is_empty() {
        return Err(GenerationError::EmptyTarget);
    }
    Ok(vec![
        ChatMessage::new(ChatRole::System, TASK_INSTRUCTION.trim_end()),
        ChatMessage::new(ChatRole::System, CERTAINTY_CRITERIA.trim_end()),
        ChatMessage::new(
            ChatRole::User,
            format!(
                "Target concept: {target}\nCategory: {}\n\n{RESPONSE_FORMAT}",
                category_label(category)
            ),
        ),
    ])
}

/// An entry as proposed by the LLM; the label is kept verbatim so unknown
/// labels survive parsing and show up as violations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntry {
    #[serde(alias = "concept", alias = "name")]
    pub text: String,
    pub certainty: String,
}

impl CandidateEntry {
    pub fn level(&self) -> Option<CertaintyLevel> {
        self.certainty.parse().ok()
    }
}

impl From<&ConceptEntry> for CandidateEntry {
    fn from(e: &ConceptEntry) -> Self {
        Self {
            text: e.text.clone(),
            certainty: e.certainty.label().to_string(),
        }
    }
}

/// One sense's coref and retain pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(default)]
    pub sense: Option<String>,
    #[serde(alias = "coref")]
    pub corefs: Vec<CandidateEntry>,
    #[serde(alias = "retain")]
    pub retains: Vec<CandidateEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Envelope {
    Senses { senses: Vec<Proposal> },
    List(Vec<Proposal>),
    Single(Proposal),
}

fn from_value(v: serde_json::Value) -> Result<Vec<Proposal>, String> {
    match serde_json::from_value::<Envelope>(v).map_err(|e| e.to_string())? {
        Envelope::Senses { senses } | Envelope::List(senses) => Ok(senses),
        Envelope::Single(p) => Ok(vec![p]),
    }
}

/// Finds the first JSON object or array embedded in prose.
fn first_json_block(text: &str) -> Option<serde_json::Value> {
    for (i, c) in text.char_indices() {
        if c == '{' || c == '[' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
            if let Some(Ok(v)) = stream.next() {
                if v.is_object() || v.is_array() {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// One [`Proposal`] per sense, in the order the LLM gave them.
///
/// Accepts the strict envelope, a bare list of senses, or a single sense
/// object, either alone or embedded in surrounding prose.
pub fn parse_generation_response(text: &str) -> Result<Vec<Proposal>, GenerationError> {
    let parse_err = |message: String| GenerationError::Parse {
        message,
        raw: text.to_string(),
    };
    let strict = serde_json::from_str::<serde_json::Value>(text.trim())
        .ok()
        .or_else(|| first_json_block(text))
        .ok_or_else(|| parse_err("no JSON object found".into()))?;
    let senses = from_value(strict).map_err(parse_err)?;
    if senses.is_empty() {
        return Err(parse_err("response lists no senses".into()));
    }
    Ok(senses)
}

/// The strict JSON envelope for `proposals`; parses back to the same value.
pub fn render_proposal(proposals: &[Proposal]) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        senses: &'a [Proposal],
    }
    serde_json::to_string_pretty(&Out { senses: proposals }).expect("serializable")
}

/// Shape and consistency checks on one sense's pools. Ordering problems are
/// warnings; everything else is an error.
pub fn validate_pools(corefs: &[CandidateEntry], retains: &[CandidateEntry], target: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut keys: [HashMap<String, usize>; 2] = [HashMap::new(), HashMap::new()];
    for (s, (name, pool)) in [("corefs", corefs), ("retains", retains)].into_iter().enumerate() {
        if pool.len() != POOL_LEN {
            out.push(Violation::error(
                ViolationCode::PoolSize,
                name,
                format!("expected {POOL_LEN} entries, found {}", pool.len()),
            ));
        }
        let mut prev: Option<f64> = None;
        for (i, e) in pool.iter().enumerate() {
            let path = format!("{name}[{i}]");
            if e.text.trim().is_empty() {
                out.push(Violation::error(ViolationCode::EmptyText, &path, "entry text is empty"));
            }
            match e.level() {
                None => out.push(Violation::error(
                    ViolationCode::UnknownCertainty,
                    &path,
                    format!("unknown certainty label {:?}", e.certainty),
                )),
                Some(level) => {
                    if prev.is_some_and(|p| level.weight() > p) {
                        out.push(Violation::warning(
                            ViolationCode::NonMonotone,
                            &path,
                            format!("{:?} ({}) follows a less certain entry", e.text, level),
                        ));
                    }
                    prev = Some(level.weight());
                }
            }
            let key = normalize_text(&e.text);
            if key.is_empty() {
                continue;
            }
            if let Some(first) = keys[s].get(&key) {
                out.push(Violation::error(
                    ViolationCode::Duplicate,
                    &path,
                    format!("{:?} duplicates {name}[{first}]", e.text),
                ));
            } else {
                keys[s].insert(key, i);
            }
        }
    }
    let target_key = normalize_text(target);
    for (i, e) in retains.iter().enumerate() {
        let key = normalize_text(&e.text);
        if key.is_empty() {
            continue;
        }
        let path = format!("retains[{i}]");
        if key == target_key {
            out.push(Violation::error(ViolationCode::TargetInRetain, &path, "retain equals the target"));
        }
        if let Some(j) = keys[0].get(&key) {
            out.push(Violation::error(
                ViolationCode::SetOverlap,
                &path,
                format!("{:?} also appears as corefs[{j}]", e.text),
            ));
        }
    }
    out
}

/// Uniform random 10/5 partition; both parts keep pool order.
pub fn split_train_test<T: Clone>(pool: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>), GenerationError> {
    if pool.len() != POOL_LEN {
        return Err(GenerationError::PoolSize {
            got: pool.len(),
            expected: POOL_LEN,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = [false; POOL_LEN];
    for i in sample_indices(&mut rng, POOL_LEN, TRAIN_LEN) {
        in_train[i] = true;
    }
    let train = pool.iter().zip(in_train).filter(|(_, t)| *t).map(|(e, _)| e.clone()).collect();
    let test = pool.iter().zip(in_train).filter(|(_, t)| !*t).map(|(e, _)| e.clone()).collect();
    Ok((train, test))
}

fn to_entries(pool: &[CandidateEntry]) -> Result<Vec<ConceptEntry>, Vec<String>> {
    let bad: Vec<String> = pool.iter().filter(|e| e.level().is_none()).map(|e| e.certainty.clone()).collect();
    if !bad.is_empty() {
        return Err(bad);
    }
    Ok(pool
        .iter()
        .map(|e| ConceptEntry::new(e.text.trim(), e.level().expect("checked")))
        .collect())
}

/// A draft record plus the pool violations found while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftRecord {
    pub record: ConceptRecord,
    pub violations: Vec<Violation>,
}

/// Draft records, one per sense. Pools of exactly 15 are split 10/5 with
/// seeds derived from `seed`; other sizes stay unsplit in `train` for the
/// curator to fix. Senses get a disambiguation only when there are several.
pub fn to_draft_records(
    target: &str,
    category: Category,
    proposals: &[Proposal],
    seed: u64,
) -> Result<Vec<DraftRecord>, GenerationError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let multi = proposals.len() > 1;
    let mut out = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let violations = validate_pools(&p.corefs, &p.retains, target);
        let corefs = to_entries(&p.corefs).map_err(GenerationError::UnknownCertainty)?;
        let retains = to_entries(&p.retains).map_err(GenerationError::UnknownCertainty)?;
        let (coref_seed, retain_seed): (u64, u64) = (seeds.random(), seeds.random());
        let split = |pool: Vec<ConceptEntry>, s: u64| -> Split {
            match split_train_test(&pool, s) {
                Ok((train, test)) => Split { train, test },
                Err(_) => Split {
                    train: pool,
                    test: Vec::new(),
                },
            }
        };
        let disambiguation = if multi {
            Some(
                p.sense
                    .clone()
                    .filter(|s| !s.trim().is_empty())
                    .unwrap_or_else(|| format!("{target} (sense {})", i + 1)),
            )
        } else {
            None
        };
        out.push(DraftRecord {
            record: ConceptRecord {
                target: target.trim().to_string(),
                category,
                disambiguation,
                state: RecordState::Draft,
                revision: 0,
                corefs: split(corefs, coref_seed),
                retains: split(retains, retain_seed),
            },
            violations,
        });
    }
    Ok(out)
}

/// A record's current lists as a single-sense proposal (train then test).
pub fn record_to_proposal(record: &ConceptRecord) -> Proposal {
    Proposal {
        sense: record.disambiguation.clone(),
        corefs: record.corefs.iter().map(CandidateEntry::from).collect(),
        retains: record.retains.iter().map(CandidateEntry::from).collect(),
    }
}

/// Send a chat, get text back. Implementations must tolerate concurrent use.
pub trait ChatClient: Send + Sync {
    fn model_id(&self) -> String;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Hex SHA-256 of the canonical JSON of `messages`.
pub fn request_hash(messages: &[ChatMessage]) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(messages).expect("serializable")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub request_hash: String,
    pub response_text: String,
}

/// Replays recorded responses keyed by [`request_hash`].
#[derive(Debug, Clone, Default)]
pub struct MockChatClient {
    fixtures: BTreeMap<String, String>,
    fallback: Option<String>,
}

impl MockChatClient {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        Self {
            fixtures: fixtures.into_iter().map(|f| (f.request_hash, f.response_text)).collect(),
            fallback: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let err = |message: String| GenerationError::Fixtures {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let fixtures: Vec<Fixture> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self::new(fixtures))
    }

    /// Response used when no fixture matches.
    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn insert(&mut self, messages: &[ChatMessage], response: impl Into<String>) {
        self.fixtures.insert(request_hash(messages), response.into());
    }
}

impl ChatClient for MockChatClient {
    fn model_id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let hash = request_hash(messages);
        self.fixtures
            .get(&hash)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or(ClientError {
                message: format!("no fixture for request {hash}"),
                retryable: false,
                attempts: 1,
            })
    }
}

/// OpenAI-compatible chat endpoint.
pub struct HttpChatClient {
    transport: ChatTransport,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        Ok(Self {
            transport: ChatTransport::new(config)?,
        })
    }
}

impl ChatClient for HttpChatClient {
    fn model_id(&self) -> String {
        self.transport.config().model.clone()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let msgs = serde_json::to_value(messages).expect("serializable");
        Ok(self.transport.complete(msgs)?)
    }
}

/// Conversation state for one target across refinement rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSession {
    pub target: String,
    pub category: Category,
    pub transcript: Vec<ChatMessage>,
    /// Every round's proposals, oldest first.
    pub proposals: Vec<Vec<Proposal>>,
    pub round: usize,
}

impl GenerationSession {
    /// Sends the initial prompt and parses the first proposal.
    pub fn start(client: &dyn ChatClient, target: &str, category: Category) -> Result<Self, GenerationError> {
        let mut transcript = build_generation_prompt(target, category)?;
        let reply = client.complete(&transcript)?;
        let proposals = parse_generation_response(&reply)?;
        transcript.push(ChatMessage::new(ChatRole::Assistant, reply));
        Ok(Self {
            target: target.trim().to_string(),
            category,
            transcript,
            proposals: vec![proposals],
            round: 1,
        })
    }

    /// A session whose first round is an existing record, so refinement can
    /// start from curated lists without a fresh generation call.
    pub fn resume_from_record(record: &ConceptRecord) -> Result<Self, GenerationError> {
        let mut transcript = build_generation_prompt(&record.target, record.category)?;
        let current = vec![record_to_proposal(record)];
        transcript.push(ChatMessage::new(ChatRole::Assistant, render_proposal(&current)));
        Ok(Self {
            target: record.target.clone(),
            category: record.category,
            transcript,
            proposals: vec![current],
            round: 1,
        })
    }

    pub fn latest(&self) -> &[Proposal] {
        self.proposals.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Appends `feedback`, re-queries with the whole transcript and records
    /// the new proposal. `self` is left untouched on any error.
    pub fn refine(&self, client: &dyn ChatClient, feedback: &str) -> Result<Self, GenerationError> {
        if feedback.trim().is_empty() {
            return Err(GenerationError::EmptyFeedback);
        }
        let mut next = self.clone();
        next.transcript.push(ChatMessage::new(ChatRole::User, feedback.trim()));
        let reply = client.complete(&next.transcript)?;
        let proposals = parse_generation_response(&reply)?;
        next.transcript.push(ChatMessage::new(ChatRole::Assistant, reply));
        next.proposals.push(proposals);
        next.round += 1;
        Ok(next)
    }
}
