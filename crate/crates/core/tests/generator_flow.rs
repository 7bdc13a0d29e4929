use crce_core::dataset::{validate_record, Category, CertaintyLevel, ViolationCode};
use crce_core::generator::{
    build_generation_prompt, parse_generation_response, render_proposal, to_draft_records, CandidateEntry,
    ChatClient, ChatMessage, ClientError, GenerationError, GenerationSession, MockChatClient, Proposal,
};
use proptest::prelude::*;

const LEVELS: [&str; 5] = ["Very High", "High", "Normal", "Low", "Very Low"];

fn pool(prefix: &str) -> Vec<CandidateEntry> {
    (0..15)
        .map(|i| CandidateEntry {
            text: format!("{prefix} {i}"),
            certainty: LEVELS[i / 3].to_string(),
        })
        .collect()
}

fn sense(name: Option<&str>, prefix: &str) -> Proposal {
    Proposal {
        sense: name.map(str::to_string),
        corefs: pool(&format!("{prefix} coref")),
        retains: pool(&format!("{prefix} retain")),
    }
}

#[test]
fn three_round_session_with_mock() {
    let first = render_proposal(&[sense(None, "r1")]);
    let mut client = MockChatClient::default();
    client.insert(&build_generation_prompt("Dog", Category::Object).unwrap(), first);
    let s1 = GenerationSession::start(&client, "Dog", Category::Object).unwrap();
    assert_eq!(s1.transcript.len(), 4);
    assert_eq!(s1.latest()[0].corefs[0].text, "r1 coref 0");

    let mut t = s1.transcript.clone();
    t.push(ChatMessage::new(crce_core::generator::ChatRole::User, "add more breeds"));
    client.insert(&t, render_proposal(&[sense(None, "r2")]));
    let s2 = s1.refine(&client, "add more breeds").unwrap();
    assert_eq!(s2.transcript.len(), s1.transcript.len() + 2);
    assert_eq!(s2.round, 2);

    let mut t = s2.transcript.clone();
    t.push(ChatMessage::new(crce_core::generator::ChatRole::User, "fewer puppies"));
    client.insert(&t, format!("Sure! Here it is:\n{}\nHope that helps.", render_proposal(&[sense(None, "r3")])));
    let s3 = s2.refine(&client, "fewer puppies").unwrap();
    assert_eq!(s3.transcript.len(), 8);
    assert_eq!(s3.proposals.len(), 3);
    assert_eq!(s3.latest()[0].retains[14].text, "r3 retain 14");
}

struct Down;

impl ChatClient for Down {
    fn model_id(&self) -> String {
        "down".into()
    }
    fn complete(&self, _: &[ChatMessage]) -> Result<String, ClientError> {
        Err(ClientError {
            message: "HTTP 503".into(),
            retryable: true,
            attempts: 4,
        })
    }
}

#[test]
fn failed_round_leaves_session_untouched() {
    let client = MockChatClient::default().with_fallback(render_proposal(&[sense(None, "a")]));
    let s = GenerationSession::start(&client, "Dog", Category::Object).unwrap();
    let before = s.clone();
    assert!(matches!(s.refine(&Down, "more"), Err(GenerationError::Client(_))));
    assert!(matches!(s.refine(&client, "  "), Err(GenerationError::EmptyFeedback)));
    let junk = MockChatClient::default().with_fallback("I cannot help with that.");
    assert!(matches!(s.refine(&junk, "more"), Err(GenerationError::Parse { .. })));
    assert_eq!(s, before);
}

#[test]
fn two_senses_give_two_drafts() {
    let text = render_proposal(&[sense(Some("fruit"), "fruit"), sense(Some("company"), "company")]);
    let proposals = parse_generation_response(&text).unwrap();
    let drafts = to_draft_records("apple", Category::Object, &proposals, 5).unwrap();
    assert_eq!(drafts.len(), 2);
    let ids: Vec<_> = drafts.iter().map(|d| d.record.id()).collect();
    assert_eq!(ids, ["apple--fruit", "apple--company"]);
    for d in &drafts {
        assert!(d.violations.is_empty());
        assert_eq!((d.record.corefs.train.len(), d.record.corefs.test.len()), (10, 5));
        assert!(validate_record(&d.record).is_empty(), "{:?}", validate_record(&d.record));
    }
    let again = to_draft_records("apple", Category::Object, &proposals, 5).unwrap();
    assert_eq!(drafts, again);
}

#[test]
fn unknown_certainty_is_reported() {
    let mut p = sense(None, "x");
    p.corefs[4].certainty = "Medium".into();
    let drafts = to_draft_records("Dog", Category::Object, &[p.clone()], 0);
    assert!(matches!(drafts, Err(GenerationError::UnknownCertainty(ref l)) if l == &["Medium".to_string()]));
    let v = crce_core::generator::validate_pools(&p.corefs, &p.retains, "Dog");
    assert!(v.iter().any(|v| v.code == ViolationCode::UnknownCertainty && v.path == "corefs[4]"));
}

#[test]
fn short_pool_is_kept_for_curation() {
    let mut p = sense(None, "x");
    p.corefs.truncate(12);
    let d = &to_draft_records("Dog", Category::Object, &[p], 0).unwrap()[0];
    assert_eq!(d.record.corefs.train.len(), 12);
    assert!(d.violations.iter().any(|v| v.code == ViolationCode::PoolSize));
}

fn candidate() -> impl Strategy<Value = CandidateEntry> {
    ("[a-z][a-z \"{}\\[\\]]{0,15}", 0usize..5).prop_map(|(text, i)| CandidateEntry {
        text,
        certainty: CertaintyLevel::ALL[i].label().to_string(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn parse_inverts_render(
        senses in prop::collection::vec(
            (prop::option::of("[a-z]{1,10}"), prop::collection::vec(candidate(), 0..16), prop::collection::vec(candidate(), 0..16)),
            1..4,
        )
    ) {
        let proposals: Vec<Proposal> = senses
            .into_iter()
            .map(|(sense, corefs, retains)| Proposal { sense, corefs, retains })
            .collect();
        prop_assert_eq!(parse_generation_response(&render_proposal(&proposals)).unwrap(), proposals);
    }
}
