use crce_core::dataset::{
    load_dataset, parse_dataset, sample_dataset, save_dataset, validate_record, CertaintyLevel, Category,
    ConceptEntry, ConceptRecord, CorefConceptDataset, DatasetError, RecordState, Split,
};
use proptest::prelude::*;

#[test]
fn bundled_sample_validates_cleanly() {
    let ds = sample_dataset();
    assert_eq!(ds.concepts.len(), 4);
    for r in &ds.concepts {
        assert!(validate_record(r).is_empty(), "{}: {:?}", r.target, validate_record(r));
    }
}

#[test]
fn horse_first_coref() {
    let ds = sample_dataset();
    let horse = ds.find("horse").unwrap();
    assert_eq!(horse.corefs.train[0], ConceptEntry::new("mare", CertaintyLevel::VeryHigh));
    assert_eq!(CertaintyLevel::VeryHigh.weight(), 1.0);
}

#[test]
fn save_then_load_is_digest_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ds.json");
    let ds = sample_dataset();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.digest(), ds.digest());
    let first = std::fs::read(&path).unwrap();
    save_dataset(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn missing_certainty_names_the_entry() {
    let text = include_str!("../data/coref_concept_sample.json");
    let broken = text.replacen(",\n            \"certainty\": \"Very High\"", "", 1);
    assert_ne!(broken, text);
    let err = parse_dataset(&broken, "broken.json").unwrap_err();
    match err {
        DatasetError::Parse { path, message, line, .. } => {
            assert!(path.contains("concepts[0].corefs.train[0]"), "{path}");
            assert!(message.contains("certainty"), "{message}");
            assert!(line > 0);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unknown_label_is_rejected() {
    let text = include_str!("../data/coref_concept_sample.json").replacen("\"Very High\"", "\"Medium\"", 1);
    assert!(parse_dataset(&text, "x").is_err());
}

#[test]
fn newer_major_version_is_rejected() {
    let text = include_str!("../data/coref_concept_sample.json").replacen("\"1.0\"", "\"2.0\"", 1);
    assert!(matches!(parse_dataset(&text, "x"), Err(DatasetError::SchemaVersion { .. })));
}

#[test]
fn missing_file() {
    assert!(matches!(load_dataset("/nonexistent/ds.json"), Err(DatasetError::Io { .. })));
}

fn entry() -> impl Strategy<Value = ConceptEntry> {
    ("[a-zA-Z][a-zA-Z ()'-]{0,20}", 0usize..5)
        .prop_map(|(t, i)| ConceptEntry::new(t, CertaintyLevel::ALL[i]))
}

fn record() -> impl Strategy<Value = ConceptRecord> {
    (
        "[A-Za-z][a-z ]{0,12}",
        prop::option::of("[a-z]{1,8}"),
        prop::bool::ANY,
        0u64..100,
        prop::collection::vec(entry(), 0..12),
        prop::collection::vec(entry(), 0..6),
        prop::collection::vec(entry(), 0..12),
        prop::collection::vec(entry(), 0..6),
    )
        .prop_map(|(target, disambiguation, ip, revision, ct, cs, rt, rs)| ConceptRecord {
            target,
            category: if ip { Category::Ip } else { Category::Object },
            disambiguation,
            state: RecordState::Draft,
            revision,
            corefs: Split { train: ct, test: cs },
            retains: Split { train: rt, test: rs },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn arbitrary_datasets_round_trip(records in prop::collection::vec(record(), 0..4)) {
        let ds = CorefConceptDataset::new(records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.digest(), ds.digest());
        prop_assert_eq!(back, ds);
    }
}
