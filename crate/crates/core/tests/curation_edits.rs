use crce_core::curation::{
    apply_edit, diff_proposal, diff_to_edits, list_records, ChangeKind, CurationError, EditCommand, EditOp,
    RecordFilter,
};
use crce_core::dataset::{sample_dataset, CertaintyLevel, Category, RecordState, ViolationCode};
use crce_core::generator::{record_to_proposal, CandidateEntry};
use serde_json::json;

fn cmd(op: EditOp, path: &str, value: serde_json::Value, rev: u64) -> EditCommand {
    EditCommand {
        record: "horse".into(),
        path: path.into(),
        operation: op,
        value,
        base_revision: rev,
    }
}

#[test]
fn certainty_edit_bumps_revision() {
    let mut ds = sample_dataset();
    let out = apply_edit(&mut ds, &cmd(EditOp::SetCertainty, "corefs.train[3]", json!("Low"), 0)).unwrap();
    assert_eq!(out.record.revision, 1);
    assert_eq!(ds.find("horse").unwrap().corefs.train[3].certainty, CertaintyLevel::Low);
    // non-monotone now, but still approvable: only a warning
    assert_eq!(out.record.state, RecordState::Approved);
    let stale = apply_edit(&mut ds, &cmd(EditOp::SetText, "corefs.train[3]", json!("foal"), 0)).unwrap_err();
    assert_eq!(stale, CurationError::RevisionConflict { current: 1, given: 0 });
    assert_eq!(stale.code(), "REVISION_CONFLICT");
}

#[test]
fn deleting_demotes_and_blocks_approval() {
    let mut ds = sample_dataset();
    let out = apply_edit(&mut ds, &cmd(EditOp::DeleteEntry, "corefs.train[9]", json!(null), 0)).unwrap();
    assert_eq!(out.record.state, RecordState::Draft);
    assert_eq!(out.record.corefs.train.len(), 9);
    match apply_edit(&mut ds, &cmd(EditOp::ApproveRecord, "", json!(null), 1)) {
        Err(CurationError::ApprovalBlocked(v)) => {
            assert!(v.iter().any(|v| v.code == ViolationCode::ListLength && v.path == "corefs.train"))
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(ds.find("horse").unwrap().revision, 1);
    apply_edit(
        &mut ds,
        &cmd(EditOp::AddEntry, "corefs.train", json!({"text": "foal", "certainty": "Very Low"}), 1),
    )
    .unwrap();
    let ok = apply_edit(&mut ds, &cmd(EditOp::ApproveRecord, "", json!(null), 2)).unwrap();
    assert_eq!(ok.record.state, RecordState::Approved);
    assert_eq!(ok.record.revision, 3);
}

#[test]
fn bad_inputs() {
    let mut ds = sample_dataset();
    let before = ds.clone();
    let cases = [
        (cmd(EditOp::SetText, "corefs.train[99]", json!("x"), 0), "INVALID_PATH"),
        (cmd(EditOp::SetText, "corefs.middle[0]", json!("x"), 0), "INVALID_PATH"),
        (cmd(EditOp::SetText, "corefs.train[0]", json!(""), 0), "INVALID_VALUE"),
        (cmd(EditOp::SetCertainty, "corefs.train[0]", json!("Medium"), 0), "INVALID_VALUE"),
        (cmd(EditOp::AddEntry, "retains.test", json!({"text": "x"}), 0), "INVALID_VALUE"),
    ];
    for (c, code) in cases {
        assert_eq!(apply_edit(&mut ds, &c).unwrap_err().code(), code, "{c:?}");
    }
    let mut missing = cmd(EditOp::SetText, "corefs.train[0]", json!("x"), 0);
    missing.record = "unicorn".into();
    assert_eq!(apply_edit(&mut ds, &missing).unwrap_err().code(), "NOT_FOUND");
    assert_eq!(ds, before);
}

#[test]
fn accepted_diff_applies_cleanly() {
    let mut ds = sample_dataset();
    let record = ds.find("horse").unwrap().clone();
    let mut proposal = record_to_proposal(&record);
    proposal.corefs.remove(2);
    proposal.corefs.push(CandidateEntry {
        text: "foal".into(),
        certainty: "Normal".into(),
    });
    proposal.retains[0].certainty = "Low".into();
    let diff = diff_proposal(&record, &proposal);
    assert_eq!(diff.entries.len(), 3);
    let kinds: Vec<_> = diff.entries.iter().map(|e| e.change).collect();
    for k in [ChangeKind::Added, ChangeKind::Removed, ChangeKind::Changed] {
        assert!(kinds.contains(&k));
    }
    let all: Vec<usize> = (0..diff.entries.len()).collect();
    let edits = diff_to_edits(&record, &diff, &all).unwrap();
    for e in &edits {
        apply_edit(&mut ds, e).unwrap();
    }
    let after = ds.find("horse").unwrap();
    assert_eq!(after.revision, 3);
    assert_eq!(after.corefs.train.len(), 10);
    assert!(after.corefs.iter().any(|e| e.text == "foal"));
    assert!(!after.corefs.iter().any(|e| e.text == record.corefs.train[2].text));
    assert_eq!(after.retains.train[0].certainty, CertaintyLevel::Low);
    // the intermediate delete demoted it; re-approval is an explicit step
    assert_eq!(after.state, RecordState::Draft);
    apply_edit(&mut ds, &cmd(EditOp::ApproveRecord, "", json!(null), 3)).unwrap();

    // only the certainty change
    let mut ds = sample_dataset();
    let i = kinds.iter().position(|k| *k == ChangeKind::Changed).unwrap();
    for e in diff_to_edits(&record, &diff, &[i]).unwrap() {
        apply_edit(&mut ds, &e).unwrap();
    }
    assert_eq!(ds.find("horse").unwrap().corefs.train, record.corefs.train);
    assert!(diff_to_edits(&record, &diff, &[42]).is_err());
}

#[test]
fn list_filters() {
    let mut ds = sample_dataset();
    apply_edit(&mut ds, &cmd(EditOp::DeleteEntry, "retains.test[0]", json!(null), 0)).unwrap();
    let all = list_records(&ds, &RecordFilter::default());
    assert_eq!(all.len(), 4);
    let drafts = list_records(
        &ds,
        &RecordFilter {
            state: Some(RecordState::Draft),
            category: None,
        },
    );
    assert_eq!(drafts.len(), 1);
    assert_eq!(drafts[0].id, "horse");
    assert_eq!(drafts[0].counts, [10, 5, 10, 4]);
    // drafts are not held to list lengths
    assert_eq!(drafts[0].violations, 0);
    let objects = list_records(
        &ds,
        &RecordFilter {
            state: None,
            category: Some(Category::Object),
        },
    );
    assert!(objects.iter().all(|r| r.category == Category::Object));
    assert_eq!(objects.len(), 2);
}
