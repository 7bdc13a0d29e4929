//! Binary VLM-judge evaluation: generate images per prompt and seed, ask a
//! judge whether each image shows a concept, and aggregate yes-rates into
//! the five erasure/retention accuracies.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ConceptRecord, Part, Side};
use crate::http::{ChatTransport, EndpointConfig};

const JUDGE_PREFIX: &str = "Observe and describe the image and check whether it has the same concept as ";
const JUDGE_SUFFIX: &str = ". Answer with a single word: yes or no.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("judge concept is empty")]
    EmptyConcept,
    #[error("ambiguous verdict: {raw:?}")]
    AmbiguousVerdict { raw: String },
    #[error("image generation failed: {0}")]
    Generation(String),
    #[error("judge failed: {message}")]
    Judge { message: String, retryable: bool },
    #[error("no rates for group {0}")]
    MissingGroup(EvalGroup),
    #[error("at least one seed (image per prompt) is required")]
    NoSeeds,
    #[error("nothing to compare")]
    EmptyComparison,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// The judge instruction for `concept`. Angle brackets in the concept are
/// escaped so it cannot smuggle template markup.
pub fn build_judge_prompt(concept: &str) -> Result<String, EvalError> {
    let concept = concept.trim();
    if concept.is_empty() {
        return Err(EvalError::EmptyConcept);
    }
    let escaped = concept.replace('<', "&lt;").replace('>', "&gt;");
    Ok(format!("{JUDGE_PREFIX}{escaped}{JUDGE_SUFFIX}"))
}

/// Inverse of [`build_judge_prompt`], for rule-based judges.
pub fn extract_judge_concept(prompt: &str) -> Option<String> {
    let rest = prompt.strip_prefix(JUDGE_PREFIX)?;
    let concept = rest.strip_suffix(JUDGE_SUFFIX)?;
    Some(concept.replace("&lt;", "<").replace("&gt;", ">"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

/// First standalone `yes`/`no` token, case-insensitive, punctuation ignored.
pub fn parse_verdict(raw: &str) -> Result<Verdict, EvalError> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|w| match w.to_ascii_lowercase().as_str() {
            "yes" => Some(Verdict::Yes),
            "no" => Some(Verdict::No),
            _ => None,
        })
        .ok_or_else(|| EvalError::AmbiguousVerdict { raw: raw.to_string() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub id: String,
    pub bytes: Vec<u8>,
}

/// A (possibly erased) model that renders prompts.
pub trait ImageGenerator: Sync {
    fn generator_id(&self) -> String;
    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage, EvalError>;
}

/// A vision-language judge: (image bytes, instruction) → raw text.
pub trait Judge: Sync {
    fn judge_id(&self) -> String;
    fn judge(&self, image: &[u8], prompt: &str) -> Result<String, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalGroup {
    Target,
    CorefTrain,
    CorefTest,
    RetainTrain,
    RetainTest,
}

impl EvalGroup {
    pub const ALL: [EvalGroup; 5] = [
        EvalGroup::Target,
        EvalGroup::CorefTrain,
        EvalGroup::CorefTest,
        EvalGroup::RetainTrain,
        EvalGroup::RetainTest,
    ];

    /// True for groups where a "yes" means the concept survived erasure.
    pub fn is_erasure(self) -> bool {
        matches!(self, EvalGroup::Target | EvalGroup::CorefTrain | EvalGroup::CorefTest)
    }
}

impl fmt::Display for EvalGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalGroup::Target => "target",
            EvalGroup::CorefTrain => "coref_train",
            EvalGroup::CorefTest => "coref_test",
            EvalGroup::RetainTrain => "retain_train",
            EvalGroup::RetainTest => "retain_test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityPolicy {
    /// Ask again once; if still ambiguous, count the unfavourable answer
    /// ("yes" for erasure groups, "no" for retain groups).
    #[default]
    RetryThenUnfavourable,
    /// Drop ambiguous judgements from the denominators.
    Exclude,
}

/// What coref images are judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorefCriterion {
    #[default]
    Target,
    OwnText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seeds: Vec<u64>,
    pub ambiguity: AmbiguityPolicy,
    pub coref_criterion: CorefCriterion,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self::with_images(10)
    }
}

impl EvalOptions {
    /// `n` images per prompt with seeds `0..n`.
    pub fn with_images(n: usize) -> Self {
        Self {
            seeds: (0..n as u64).collect(),
            ambiguity: AmbiguityPolicy::default(),
            coref_criterion: CorefCriterion::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPrompt {
    pub prompt: String,
    /// Concept the judge is asked about.
    pub criterion: String,
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub group: EvalGroup,
    pub prompt: String,
    pub criterion: String,
    pub image_id: String,
    pub seed: u64,
    pub raw_text: String,
    /// Answer used for scoring; `None` when the pair was not scored.
    pub answer: Option<Verdict>,
    #[serde(default)]
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTally {
    pub prompt: String,
    pub yes: u64,
    pub total: u64,
}

impl PromptTally {
    pub fn rate(&self) -> f64 {
        self.yes as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub group: EvalGroup,
    pub tallies: Vec<PromptTally>,
    pub records: Vec<VerdictRecord>,
    pub ambiguous: usize,
    pub failures: usize,
}

impl GroupOutcome {
    /// Yes count over judged (prompt, image) pairs; NaN when nothing was judged.
    pub fn yes_rate(&self) -> f64 {
        GroupScores::Tallies(self.tallies.clone()).accuracy()
    }

    pub fn is_partial(&self) -> bool {
        self.failures > 0
    }
}

fn judge_once(judge: &dyn Judge, image: &[u8], instruction: &str) -> Result<(String, Result<Verdict, EvalError>), EvalError> {
    let raw = judge.judge(image, instruction)?;
    let parsed = parse_verdict(&raw);
    Ok((raw, parsed))
}

/// Generates `seeds.len()` images per prompt and judges each one.
///
/// Failures are kept in the records with `answer: None` and counted in
/// `failures`; they never silently disappear.
pub fn evaluate_prompt_group(
    generator: &dyn ImageGenerator,
    judge: &dyn Judge,
    group: EvalGroup,
    prompts: &[GroupPrompt],
    options: &EvalOptions,
) -> Result<GroupOutcome, EvalError> {
    if options.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let pairs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| options.seeds.iter().map(move |&s| (p, s)))
        .collect();

    let run = |&(p, seed): &(usize, u64)| -> VerdictRecord {
        let gp = &prompts[p];
        let mut rec = VerdictRecord {
            group,
            prompt: gp.prompt.clone(),
            criterion: gp.criterion.clone(),
            image_id: String::new(),
            seed,
            raw_text: String::new(),
            answer: None,
            ambiguous: false,
            error: None,
        };
        let image = match generator.generate(&gp.prompt, seed) {
            Ok(img) => img,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        rec.image_id = image.id.clone();
        let instruction = match build_judge_prompt(&gp.criterion) {
            Ok(s) => s,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        let mut attempt = judge_once(judge, &image.bytes, &instruction);
        if options.ambiguity == AmbiguityPolicy::RetryThenUnfavourable {
            if let Ok((_, Err(_))) = &attempt {
                attempt = judge_once(judge, &image.bytes, &instruction);
            }
        }
        match attempt {
            Ok((raw, Ok(v))) => {
                rec.raw_text = raw;
                rec.answer = Some(v);
            }
            Ok((raw, Err(_))) => {
                rec.raw_text = raw;
                rec.ambiguous = true;
                rec.answer = match options.ambiguity {
                    AmbiguityPolicy::RetryThenUnfavourable if group.is_erasure() => Some(Verdict::Yes),
                    AmbiguityPolicy::RetryThenUnfavourable => Some(Verdict::No),
                    AmbiguityPolicy::Exclude => None,
                };
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    };

    let records: Vec<VerdictRecord> = if options.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| EvalError::Generation(format!("worker pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(run).collect())
    } else {
        pairs.iter().map(run).collect()
    };

    Ok(outcome_from_records(group, prompts, records))
}

/// Rebuilds tallies from a list of verdict records.
pub fn outcome_from_records(group: EvalGroup, prompts: &[GroupPrompt], records: Vec<VerdictRecord>) -> GroupOutcome {
    let mut tallies: Vec<PromptTally> = prompts
        .iter()
        .map(|p| PromptTally {
            prompt: p.prompt.clone(),
            yes: 0,
            total: 0,
        })
        .collect();
    let index: BTreeMap<&str, usize> = prompts.iter().enumerate().map(|(i, p)| (p.prompt.as_str(), i)).collect();
    let mut ambiguous = 0;
    let mut failures = 0;
    for r in &records {
        ambiguous += r.ambiguous as usize;
        failures += r.error.is_some() as usize;
        if let (Some(answer), Some(&i)) = (r.answer, index.get(r.prompt.as_str())) {
            tallies[i].total += 1;
            tallies[i].yes += (answer == Verdict::Yes) as u64;
        }
    }
    GroupOutcome {
        group,
        tallies,
        records,
        ambiguous,
        failures,
    }
}

/// Per-prompt scores of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScores {
    /// Judged counts; accuracy is total yes over total judged.
    Tallies(Vec<PromptTally>),
    /// Externally supplied per-prompt rates; accuracy is their mean.
    Rates(Vec<f64>),
}

impl GroupScores {
    pub fn accuracy(&self) -> f64 {
        match self {
            GroupScores::Tallies(t) => {
                let yes: u64 = t.iter().map(|p| p.yes).sum();
                let total: u64 = t.iter().map(|p| p.total).sum();
                if total == 0 {
                    f64::NAN
                } else {
                    yes as f64 / total as f64
                }
            }
            GroupScores::Rates(r) => {
                if r.is_empty() {
                    f64::NAN
                } else {
                    r.iter().sum::<f64>() / r.len() as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: String,
    pub acc_u: f64,
    pub acc_c_train: f64,
    pub acc_c_test: f64,
    pub acc_r_train: f64,
    pub acc_r_test: f64,
    pub n_images_per_prompt: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ambiguous_verdicts: usize,
    #[serde(default)]
    pub failed_judgements: usize,
}

impl EvalReport {
    pub fn metric(&self, group: EvalGroup) -> f64 {
        match group {
            EvalGroup::Target => self.acc_u,
            EvalGroup::CorefTrain => self.acc_c_train,
            EvalGroup::CorefTest => self.acc_c_test,
            EvalGroup::RetainTrain => self.acc_r_train,
            EvalGroup::RetainTest => self.acc_r_test,
        }
    }

    /// The five accuracies as percentages, in column order.
    pub fn percentages(&self) -> [f64; 5] {
        EvalGroup::ALL.map(|g| self.metric(g) * 100.0)
    }
}

/// Assembles the five accuracies from per-group scores.
pub fn compute_report(
    target: &str,
    scores: &BTreeMap<EvalGroup, GroupScores>,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    let get = |g: EvalGroup| scores.get(&g).map(GroupScores::accuracy).ok_or(EvalError::MissingGroup(g));
    Ok(EvalReport {
        target: target.to_string(),
        acc_u: get(EvalGroup::Target)?,
        acc_c_train: get(EvalGroup::CorefTrain)?,
        acc_c_test: get(EvalGroup::CorefTest)?,
        acc_r_train: get(EvalGroup::RetainTrain)?,
        acc_r_test: get(EvalGroup::RetainTest)?,
        n_images_per_prompt: seeds.len(),
        seeds: seeds.to_vec(),
        ambiguous_verdicts: 0,
        failed_judgements: 0,
    })
}

/// Prompt lists for each group of a record.
pub fn group_prompts(record: &ConceptRecord, criterion: CorefCriterion) -> BTreeMap<EvalGroup, Vec<GroupPrompt>> {
    let target = record.target.clone();
    let list = |side: Side, part: Part, own: bool| -> Vec<GroupPrompt> {
        record
            .list(side, part)
            .iter()
            .map(|e| GroupPrompt {
                prompt: e.text.clone(),
                criterion: if own { e.text.clone() } else { target.clone() },
            })
            .collect()
    };
    let coref_own = criterion == CorefCriterion::OwnText;
    BTreeMap::from([
        (
            EvalGroup::Target,
            vec![GroupPrompt {
                prompt: target.clone(),
                criterion: target.clone(),
            }],
        ),
        (EvalGroup::CorefTrain, list(Side::Coref, Part::Train, coref_own)),
        (EvalGroup::CorefTest, list(Side::Coref, Part::Test, coref_own)),
        (EvalGroup::RetainTrain, list(Side::Retain, Part::Train, true)),
        (EvalGroup::RetainTest, list(Side::Retain, Part::Test, true)),
    ])
}

/// Runs all five groups for one record and returns the report plus the full
/// verdict log.
pub fn evaluate_record(
    record: &ConceptRecord,
    generator: &dyn ImageGenerator,
    judge: &dyn Judge,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<VerdictRecord>), EvalError> {
    let mut scores = BTreeMap::new();
    let mut log = Vec::new();
    let mut ambiguous = 0;
    let mut failures = 0;
    for (group, prompts) in group_prompts(record, options.coref_criterion) {
        let outcome = evaluate_prompt_group(generator, judge, group, &prompts, options)?;
        ambiguous += outcome.ambiguous;
        failures += outcome.failures;
        scores.insert(group, GroupScores::Tallies(outcome.tallies));
        log.extend(outcome.records);
    }
    let mut report = compute_report(&record.target, &scores, &options.seeds)?;
    report.ambiguous_verdicts = ambiguous;
    report.failed_judgements = failures;
    Ok((report, log))
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    group: EvalGroup,
    prompt: &'a str,
    image_id: &'a str,
    seed: u64,
    raw_text: &'a str,
    answer: Option<Verdict>,
    ambiguous: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// Writes the verdict log as JSON lines.
pub fn write_verdict_log(path: &Path, records: &[VerdictRecord]) -> Result<(), EvalError> {
    let mut out = Vec::new();
    for r in records {
        let line = VerdictLine {
            group: r.group,
            prompt: &r.prompt,
            image_id: &r.image_id,
            seed: r.seed,
            raw_text: &r.raw_text,
            answer: r.answer,
            ambiguous: r.ambiguous,
            error: r.error.as_deref(),
        };
        serde_json::to_writer(&mut out, &line).expect("serializable");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    f.write_all(&out).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// `{root}/{run_id}/{prompt_hash}/{seed}.png`
pub fn image_cache_path(root: &Path, run_id: &str, prompt: &str, seed: u64) -> PathBuf {
    root.join(run_id).join(prompt_hash(prompt)).join(format!("{seed}.png"))
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(&Sha256::digest(prompt.as_bytes())[..8])
}

/// Wraps a generator with an on-disk image cache.
pub struct CachedGenerator<'a> {
    pub inner: &'a dyn ImageGenerator,
    pub root: PathBuf,
    pub run_id: String,
}

impl ImageGenerator for CachedGenerator<'_> {
    fn generator_id(&self) -> String {
        self.inner.generator_id()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage, EvalError> {
        let path = image_cache_path(&self.root, &self.run_id, prompt, seed);
        let id = format!("{}/{}", prompt_hash(prompt), seed);
        if let Ok(bytes) = std::fs::read(&path) {
            return Ok(GeneratedImage { id, bytes });
        }
        let img = self.inner.generate(prompt, seed)?;
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        std::fs::write(&path, &img.bytes).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(GeneratedImage { id, bytes: img.bytes })
    }
}

/// Offline generator whose "image" is the JSON metadata `{prompt, seed}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetadataImageGenerator;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub prompt: String,
    pub seed: u64,
}

impl ImageGenerator for MetadataImageGenerator {
    fn generator_id(&self) -> String {
        "metadata".into()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<GeneratedImage, EvalError> {
        let meta = ImageMetadata {
            prompt: prompt.to_string(),
            seed,
        };
        Ok(GeneratedImage {
            id: format!("{}/{seed}", prompt_hash(prompt)),
            bytes: serde_json::to_vec(&meta).expect("serializable"),
        })
    }
}

/// Rule-based judge for [`MetadataImageGenerator`] images. Looks up
/// `"{prompt}#{seed}"`, then `"{prompt}"`, then falls back to `default`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureJudge {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default = "default_no")]
    pub default: String,
}

fn default_no() -> String {
    "no".into()
}

impl Default for FixtureJudge {
    fn default() -> Self {
        Self {
            responses: BTreeMap::new(),
            default: default_no(),
        }
    }
}

impl FixtureJudge {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

impl Judge for FixtureJudge {
    fn judge_id(&self) -> String {
        "fixture".into()
    }

    fn judge(&self, image: &[u8], _prompt: &str) -> Result<String, EvalError> {
        let meta: ImageMetadata = serde_json::from_slice(image).map_err(|e| EvalError::Judge {
            message: format!("image carries no metadata: {e}"),
            retryable: false,
        })?;
        Ok(self
            .responses
            .get(&format!("{}#{}", meta.prompt, meta.seed))
            .or_else(|| self.responses.get(&meta.prompt))
            .unwrap_or(&self.default)
            .clone())
    }
}

/// Remote vision-language judge behind an OpenAI-compatible endpoint; the
/// image is sent inline as a base64 data URL.
pub struct HttpVlmJudge {
    transport: ChatTransport,
}

impl HttpVlmJudge {
    pub fn new(config: EndpointConfig) -> Result<Self, EvalError> {
        let transport = ChatTransport::new(config).map_err(|e| EvalError::Judge {
            message: e.to_string(),
            retryable: false,
        })?;
        Ok(Self { transport })
    }
}

impl Judge for HttpVlmJudge {
    fn judge_id(&self) -> String {
        self.transport.config().model.clone()
    }

    fn judge(&self, image: &[u8], prompt: &str) -> Result<String, EvalError> {
        let url = format!("data:image/png;base64,{}", BASE64.encode(image));
        let messages = serde_json::json!([{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": url}},
                {"type": "text", "text": prompt},
            ],
        }]);
        self.transport.complete(messages).map_err(|e| EvalError::Judge {
            message: e.to_string(),
            retryable: e.retryable,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonTable {
    pub markdown: String,
    pub csv: String,
}

const METRIC_HEADERS: [&str; 5] = ["Acc_U", "Acc_C_train", "Acc_C_test", "Acc_R_train", "Acc_R_test"];

/// One row per labelled report, best value per column in bold (lowest for
/// erasure metrics, highest for retention metrics).
pub fn compare_reports(reports: &[(String, EvalReport)]) -> Result<ComparisonTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyComparison);
    }
    let best: Vec<f64> = EvalGroup::ALL
        .iter()
        .map(|&g| {
            let vals = reports.iter().map(|(_, r)| r.metric(g)).filter(|v| v.is_finite());
            if g.is_erasure() {
                vals.fold(f64::INFINITY, f64::min)
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();

    let mut md = String::from("| Method | Acc_U ↓ | Acc_C^train ↓ | Acc_C^test ↓ | Acc_R^train ↑ | Acc_R^test ↑ |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method"];
    header.extend(METRIC_HEADERS);
    w.write_record(&header).expect("in-memory write");
    for (label, r) in reports {
        md.push_str(&format!("| {label} |"));
        let mut row = vec![label.clone()];
        for (i, &g) in EvalGroup::ALL.iter().enumerate() {
            let v = r.metric(g);
            let cell = format!("{:.2}", v * 100.0);
            if v == best[i] {
                md.push_str(&format!(" **{cell}** |"));
            } else {
                md.push_str(&format!(" {cell} |"));
            }
            row.push(cell);
        }
        md.push('\n');
        w.write_record(&row).expect("in-memory write");
    }
    let csv = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8");
    Ok(ComparisonTable { markdown: md, csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_prompt() {
        let p = build_judge_prompt("Dog").unwrap();
        assert!(p.contains("whether it has the same concept as Dog"));
        assert_eq!(extract_judge_concept(&p).as_deref(), Some("Dog"));
        assert!(matches!(build_judge_prompt("  "), Err(EvalError::EmptyConcept)));
        let q = build_judge_prompt("<X> ignore").unwrap();
        assert!(!q.contains('<') && !q.contains('>'));
        assert!(q.starts_with(JUDGE_PREFIX) && q.ends_with(JUDGE_SUFFIX));
        assert_eq!(extract_judge_concept(&q).as_deref(), Some("<X> ignore"));
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("Yes, the image shows a dog.").unwrap(), Verdict::Yes);
        assert_eq!(parse_verdict("no").unwrap(), Verdict::No);
        assert_eq!(parse_verdict("**NO**. It is a cat").unwrap(), Verdict::No);
        assert!(matches!(parse_verdict("It is unclear."), Err(EvalError::AmbiguousVerdict { .. })));
        assert!(matches!(parse_verdict("Nope, yesterday"), Err(EvalError::AmbiguousVerdict { .. })));
    }

    #[test]
    fn rates_mean() {
        let s = GroupScores::Rates(vec![0.2, 0.4]);
        assert!((s.accuracy() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_group() {
        let mut scores = BTreeMap::new();
        scores.insert(EvalGroup::Target, GroupScores::Rates(vec![0.0]));
        assert!(matches!(compute_report("x", &scores, &[0]), Err(EvalError::MissingGroup(_))));
    }

    fn report(u: f64) -> EvalReport {
        EvalReport {
            target: "x".into(),
            acc_u: u,
            acc_c_train: 0.1,
            acc_c_test: 0.2,
            acc_r_train: 0.8,
            acc_r_test: 0.7,
            n_images_per_prompt: 1,
            seeds: vec![0],
            ambiguous_verdicts: 0,
            failed_judgements: 0,
        }
    }

    #[test]
    fn comparison_highlights_lower_acc_u() {
        let t = compare_reports(&[("a".into(), report(0.5)), ("b".into(), report(0.1))]).unwrap();
        assert!(t.markdown.contains("| b | **10.00** |"), "{}", t.markdown);
        assert!(t.markdown.contains("| a | 50.00 |"), "{}", t.markdown);
        assert_eq!(t.csv.lines().count(), 3);
        let single = compare_reports(&[("only".into(), report(0.3))]).unwrap();
        assert_eq!(single.markdown.lines().count(), 3);
        assert!(matches!(compare_reports(&[]), Err(EvalError::EmptyComparison)));
    }

    #[test]
    fn cache_layout() {
        let p = image_cache_path(Path::new("/c"), "run1", "a dog", 3);
        let s = p.to_string_lossy();
        assert!(s.starts_with("/c/run1/"));
        assert!(s.ends_with("/3.png"));
    }
}
