//! Expert edits on dataset records with optimistic locking, record
//! summaries, and diffs between a record and a regenerated proposal.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    has_errors, normalize_text, validate_record, validate_record_as, Category, CertaintyLevel, ConceptEntry,
    ConceptRecord, CorefConceptDataset, DatasetError, Part, RecordState, Side, Violation, TEST_LEN, TRAIN_LEN,
};
use crate::generator::{CandidateEntry, Proposal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    SetText,
    SetCertainty,
    DeleteEntry,
    AddEntry,
    ApproveRecord,
}

/// One expert edit. `path` addresses an entry (`corefs.train[3]`) or, for
/// `add_entry`, a list (`retains.test`); it is ignored by `approve_record`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCommand {
    pub record: String,
    #[serde(default)]
    pub path: String,
    pub operation: EditOp,
    #[serde(default)]
    pub value: serde_json::Value,
    pub base_revision: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurationError {
    #[error("record {0:?} not found")]
    NotFound(String),
    #[error("revision conflict: record is at {current}, edit was based on {given}")]
    RevisionConflict { current: u64, given: u64 },
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("record cannot be approved: {} violation(s)", .0.len())]
    ApprovalBlocked(Vec<Violation>),
}

impl CurationError {
    /// Stable machine-readable code for API clients.
    pub fn code(&self) -> &'static str {
        match self {
            CurationError::NotFound(_) => "NOT_FOUND",
            CurationError::RevisionConflict { .. } => "REVISION_CONFLICT",
            CurationError::InvalidPath(_) => "INVALID_PATH",
            CurationError::InvalidValue(_) => "INVALID_VALUE",
            CurationError::ApprovalBlocked(_) => "APPROVAL_BLOCKED",
        }
    }
}

impl From<DatasetError> for CurationError {
    fn from(e: DatasetError) -> Self {
        CurationError::NotFound(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryPath {
    pub side: Side,
    pub part: Part,
    pub index: Option<usize>,
}

impl EntryPath {
    pub fn parse(path: &str) -> Result<Self, CurationError> {
        let bad = || CurationError::InvalidPath(path.to_string());
        let (list, index) = match path.split_once('[') {
            Some((list, rest)) => {
                let idx = rest.strip_suffix(']').ok_or_else(bad)?;
                (list, Some(idx.parse::<usize>().map_err(|_| bad())?))
            }
            None => (path, None),
        };
        let (side, part) = list.split_once('.').ok_or_else(bad)?;
        let side = match side {
            "corefs" => Side::Coref,
            "retains" => Side::Retain,
            _ => return Err(bad()),
        };
        let part = match part {
            "train" => Part::Train,
            "test" => Part::Test,
            _ => return Err(bad()),
        };
        Ok(Self { side, part, index })
    }

    pub fn list_key(&self) -> String {
        format!("{}.{}", self.side.key(), self.part.key())
    }
}

impl std::fmt::Display for EntryPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{i}]", self.list_key()),
            None => f.write_str(&self.list_key()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub record: ConceptRecord,
    pub violations: Vec<Violation>,
}

fn value_str(v: &serde_json::Value) -> Result<&str, CurationError> {
    v.as_str()
        .ok_or_else(|| CurationError::InvalidValue(format!("expected a string, got {v}")))
}

fn value_level(v: &serde_json::Value) -> Result<CertaintyLevel, CurationError> {
    value_str(v)?
        .parse()
        .map_err(|e: DatasetError| CurationError::InvalidValue(e.to_string()))
}

fn entry_mut<'a>(record: &'a mut ConceptRecord, path: &str) -> Result<&'a mut ConceptEntry, CurationError> {
    let p = EntryPath::parse(path)?;
    let i = p.index.ok_or_else(|| CurationError::InvalidPath(path.to_string()))?;
    record
        .list_mut(p.side, p.part)
        .get_mut(i)
        .ok_or_else(|| CurationError::InvalidPath(path.to_string()))
}

/// Applies `cmd` to a copy of the record and commits it only if every step
/// succeeds. Content edits bump the revision and send an approved record
/// back to draft when it no longer validates as approved.
pub fn apply_edit(dataset: &mut CorefConceptDataset, cmd: &EditCommand) -> Result<EditOutcome, CurationError> {
    let current = dataset.find(&cmd.record)?;
    if current.revision != cmd.base_revision {
        return Err(CurationError::RevisionConflict {
            current: current.revision,
            given: cmd.base_revision,
        });
    }
    let mut rec = current.clone();
    match cmd.operation {
        EditOp::SetText => {
            let text = value_str(&cmd.value)?.trim().to_string();
            if text.is_empty() {
                return Err(CurationError::InvalidValue("text is empty".into()));
            }
            entry_mut(&mut rec, &cmd.path)?.text = text;
        }
        EditOp::SetCertainty => {
            let level = value_level(&cmd.value)?;
            entry_mut(&mut rec, &cmd.path)?.certainty = level;
        }
        EditOp::DeleteEntry => {
            let p = EntryPath::parse(&cmd.path)?;
            let i = p.index.ok_or_else(|| CurationError::InvalidPath(cmd.path.clone()))?;
            let list = rec.list_mut(p.side, p.part);
            if i >= list.len() {
                return Err(CurationError::InvalidPath(cmd.path.clone()));
            }
            list.remove(i);
        }
        EditOp::AddEntry => {
            let p = EntryPath::parse(&cmd.path)?;
            let entry: CandidateEntry = serde_json::from_value(cmd.value.clone())
                .map_err(|e| CurationError::InvalidValue(e.to_string()))?;
            let level = entry
                .level()
                .ok_or_else(|| CurationError::InvalidValue(format!("unknown certainty {:?}", entry.certainty)))?;
            if entry.text.trim().is_empty() {
                return Err(CurationError::InvalidValue("text is empty".into()));
            }
            let list = rec.list_mut(p.side, p.part);
            let at = p.index.unwrap_or(list.len());
            if at > list.len() {
                return Err(CurationError::InvalidPath(cmd.path.clone()));
            }
            list.insert(at, ConceptEntry::new(entry.text.trim(), level));
        }
        EditOp::ApproveRecord => {
            let violations = validate_record_as(&rec, RecordState::Approved);
            if has_errors(&violations) {
                return Err(CurationError::ApprovalBlocked(violations));
            }
            rec.state = RecordState::Approved;
        }
    }
    if rec.state == RecordState::Approved && has_errors(&validate_record_as(&rec, RecordState::Approved)) {
        rec.state = RecordState::Draft;
    }
    rec.revision += 1;
    let violations = validate_record(&rec);
    let slot = dataset.find_mut(&cmd.record)?;
    *slot = rec.clone();
    Ok(EditOutcome { record: rec, violations })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFilter {
    pub state: Option<RecordState>,
    pub category: Option<Category>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub target: String,
    pub category: Category,
    pub disambiguation: Option<String>,
    pub state: RecordState,
    pub revision: u64,
    /// Lengths of corefs.train, corefs.test, retains.train, retains.test.
    pub counts: [usize; 4],
    pub violations: usize,
}

pub fn list_records(dataset: &CorefConceptDataset, filter: &RecordFilter) -> Vec<RecordSummary> {
    dataset
        .concepts
        .iter()
        .filter(|r| filter.state.is_none_or(|s| r.state == s))
        .filter(|r| filter.category.is_none_or(|c| r.category == c))
        .map(|r| RecordSummary {
            id: r.id(),
            target: r.target.clone(),
            category: r.category,
            disambiguation: r.disambiguation.clone(),
            state: r.state,
            revision: r.revision,
            counts: [r.corefs.train.len(), r.corefs.test.len(), r.retains.train.len(), r.retains.test.len()],
            violations: validate_record(r).len(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Removed,
    Changed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub side: Side,
    pub change: ChangeKind,
    pub text: String,
    /// Location in the current record; absent for additions.
    pub path: Option<String>,
    pub old_certainty: Option<CertaintyLevel>,
    /// Raw label from the proposal; absent for removals.
    pub new_certainty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalDiff {
    pub record: String,
    pub base_revision: u64,
    pub sense: Option<String>,
    pub entries: Vec<DiffEntry>,
}

/// Structured difference between the record's lists and one proposal sense,
/// matching entries by normalized text. Removals come first, then changes,
/// then additions, each in list order.
pub fn diff_proposal(record: &ConceptRecord, proposal: &Proposal) -> ProposalDiff {
    let mut entries = Vec::new();
    for (side, pool) in [(Side::Coref, &proposal.corefs), (Side::Retain, &proposal.retains)] {
        let proposed: HashMap<String, &CandidateEntry> =
            pool.iter().map(|e| (normalize_text(&e.text), e)).collect();
        let mut current: HashMap<String, ()> = HashMap::new();
        let mut changed = Vec::new();
        for part in [Part::Train, Part::Test] {
            for (i, e) in record.list(side, part).iter().enumerate() {
                let key = normalize_text(&e.text);
                current.insert(key.clone(), ());
                let path = Some(format!("{}.{}[{i}]", side.key(), part.key()));
                match proposed.get(&key) {
                    None => entries.push(DiffEntry {
                        side,
                        change: ChangeKind::Removed,
                        text: e.text.clone(),
                        path,
                        old_certainty: Some(e.certainty),
                        new_certainty: None,
                    }),
                    Some(p) if p.level() != Some(e.certainty) => changed.push(DiffEntry {
                        side,
                        change: ChangeKind::Changed,
                        text: e.text.clone(),
                        path,
                        old_certainty: Some(e.certainty),
                        new_certainty: Some(p.certainty.clone()),
                    }),
                    Some(_) => {}
                }
            }
        }
        entries.extend(changed);
        for e in pool {
            if !current.contains_key(&normalize_text(&e.text)) {
                entries.push(DiffEntry {
                    side,
                    change: ChangeKind::Added,
                    text: e.text.clone(),
                    path: None,
                    old_certainty: None,
                    new_certainty: Some(e.certainty.clone()),
                });
            }
        }
    }
    ProposalDiff {
        record: record.id(),
        base_revision: record.revision,
        sense: proposal.sense.clone(),
        entries,
    }
}

/// Edit commands realizing the accepted diff entries (`accepted` holds
/// indices into `diff.entries`), chained on consecutive revisions.
///
/// Removals are issued from the highest index down so earlier paths stay
/// valid; additions fill `train` up to 10, then `test` up to 5, then append
/// to `train`.
pub fn diff_to_edits(record: &ConceptRecord, diff: &ProposalDiff, accepted: &[usize]) -> Result<Vec<EditCommand>, CurationError> {
    let mut chosen = Vec::new();
    for &i in accepted {
        chosen.push(
            diff.entries
                .get(i)
                .ok_or_else(|| CurationError::InvalidValue(format!("no diff entry {i}")))?,
        );
    }
    let mut ops: Vec<(EditOp, String, serde_json::Value)> = Vec::new();
    for d in chosen.iter().filter(|d| d.change == ChangeKind::Changed) {
        ops.push((
            EditOp::SetCertainty,
            d.path.clone().unwrap_or_default(),
            serde_json::Value::String(d.new_certainty.clone().unwrap_or_default()),
        ));
    }
    let mut removals: Vec<EntryPath> = chosen
        .iter()
        .filter(|d| d.change == ChangeKind::Removed)
        .map(|d| EntryPath::parse(d.path.as_deref().unwrap_or("")))
        .collect::<Result<_, _>>()?;
    removals.sort_by_key(|p| std::cmp::Reverse(p.index));
    let mut lens: HashMap<(Side, Part), usize> = [Side::Coref, Side::Retain]
        .into_iter()
        .flat_map(|s| [Part::Train, Part::Test].map(|p| ((s, p), record.list(s, p).len())))
        .collect();
    for p in removals {
        *lens.get_mut(&(p.side, p.part)).expect("known list") -= 1;
        ops.push((EditOp::DeleteEntry, p.to_string(), serde_json::Value::Null));
    }
    for d in chosen.iter().filter(|d| d.change == ChangeKind::Added) {
        let part = if lens[&(d.side, Part::Train)] < TRAIN_LEN {
            Part::Train
        } else if lens[&(d.side, Part::Test)] < TEST_LEN {
            Part::Test
        } else {
            Part::Train
        };
        *lens.get_mut(&(d.side, part)).expect("known list") += 1;
        ops.push((
            EditOp::AddEntry,
            format!("{}.{}", d.side.key(), part.key()),
            serde_json::json!({"text": d.text, "certainty": d.new_certainty.clone().unwrap_or_default()}),
        ));
    }
    Ok(ops
        .into_iter()
        .enumerate()
        .map(|(i, (operation, path, value))| EditCommand {
            record: diff.record.clone(),
            path,
            operation,
            value,
            base_revision: diff.base_revision + i as u64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_dataset;

    #[test]
    fn paths() {
        let p = EntryPath::parse("corefs.train[3]").unwrap();
        assert_eq!((p.side, p.part, p.index), (Side::Coref, Part::Train, Some(3)));
        assert_eq!(p.to_string(), "corefs.train[3]");
        assert!(EntryPath::parse("retains.test").unwrap().index.is_none());
        for bad in ["", "corefs", "coref.train[1]", "corefs.train[x]", "corefs.train[1"] {
            assert!(matches!(EntryPath::parse(bad), Err(CurationError::InvalidPath(_))), "{bad}");
        }
    }

    #[test]
    fn stale_revision_changes_nothing() {
        let mut d = sample_dataset();
        let before = d.clone();
        let cmd = EditCommand {
            record: "horse".into(),
            path: "corefs.train[0]".into(),
            operation: EditOp::SetText,
            value: "stallion".into(),
            base_revision: 7,
        };
        assert_eq!(apply_edit(&mut d, &cmd).unwrap_err().code(), "REVISION_CONFLICT");
        assert_eq!(d, before);
    }

    #[test]
    fn deleting_from_approved_record_demotes_it() {
        let mut d = sample_dataset();
        let cmd = EditCommand {
            record: "horse".into(),
            path: "corefs.train[9]".into(),
            operation: EditOp::DeleteEntry,
            value: serde_json::Value::Null,
            base_revision: 0,
        };
        let out = apply_edit(&mut d, &cmd).unwrap();
        assert_eq!(out.record.state, RecordState::Draft);
        assert_eq!(out.record.revision, 1);
        let approve = EditCommand {
            operation: EditOp::ApproveRecord,
            path: String::new(),
            base_revision: 1,
            ..cmd
        };
        match apply_edit(&mut d, &approve) {
            Err(CurationError::ApprovalBlocked(v)) => assert_eq!(v[0].path, "corefs.train"),
            other => panic!("{other:?}"),
        }
    }
}
