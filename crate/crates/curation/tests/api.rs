use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use crce_core::curation::RecordSummary;
use crce_core::dataset::{load_dataset, sample_dataset, CertaintyLevel};
use crce_core::generator::{record_to_proposal, render_proposal, MockChatClient};
use crce_curation::{router, AppState, ErrorBody, RecordView, RegenerateResponse};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const ORIGIN: &str = "http://localhost:5173";

fn app(path: Option<std::path::PathBuf>, chat: Option<MockChatClient>) -> (Router, Arc<AppState>) {
    let chat = chat.map(|c| Arc::new(c) as Arc<dyn crce_core::generator::ChatClient>);
    let state = Arc::new(AppState::new(sample_dataset(), path, chat));
    (router(state.clone(), ORIGIN), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn list_and_filter() {
    let (app, _) = app(None, None);
    let (st, v) = call(&app, "GET", "/records", None).await;
    assert_eq!(st, StatusCode::OK);
    let all: Vec<RecordSummary> = serde_json::from_value(v).unwrap();
    assert_eq!(all.len(), 4);
    let (_, v) = call(&app, "GET", "/records?category=celebrity", None).await;
    let celebs: Vec<RecordSummary> = serde_json::from_value(v).unwrap();
    assert_eq!(celebs.len(), 1);
    assert_eq!(celebs[0].target, "Tom Cruise");
    let (_, v) = call(&app, "GET", "/records?state=draft", None).await;
    assert_eq!(v, json!([]));
    let (st, v) = call(&app, "GET", "/records/unicorn", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "NOT_FOUND");
}

#[tokio::test]
async fn edit_persists_and_bumps_revision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    let (app, _) = app(Some(path.clone()), None);
    let (st, v) = call(
        &app,
        "POST",
        "/records/horse/edits",
        Some(json!({"path": "corefs.train[3]", "operation": "set_certainty", "value": "Low", "base_revision": 0})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let view: RecordView = serde_json::from_value(v).unwrap();
    assert_eq!(view.record.revision, 1);
    let on_disk = load_dataset(&path).unwrap();
    assert_eq!(on_disk.find("horse").unwrap().corefs.train[3].certainty, CertaintyLevel::Low);
    assert_eq!(on_disk.find("horse").unwrap().revision, 1);

    let (st, v) = call(
        &app,
        "POST",
        "/records/horse/edits",
        Some(json!({"path": "corefs.train[3]", "operation": "set_text", "value": "foal", "base_revision": 0})),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_value(v).unwrap();
    assert_eq!(err.code, "REVISION_CONFLICT");
    assert_eq!(err.current_revision, Some(1));
}

#[tokio::test]
async fn concurrent_conflicting_edits_one_wins() {
    let (app, state) = app(None, None);
    let mut handles = Vec::new();
    for text in ["foal", "steed", "nag", "charger"] {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            call(
                &app,
                "POST",
                "/records/horse/edits",
                Some(json!({"path": "corefs.train[0]", "operation": "set_text", "value": text, "base_revision": 0})),
            )
            .await
            .0
        }));
    }
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 3);
    assert_eq!(state.snapshot().find("horse").unwrap().revision, 1);
}

#[tokio::test]
async fn approval_is_gated() {
    let (app, _) = app(None, None);
    let (st, _) = call(
        &app,
        "POST",
        "/records/horse/edits",
        Some(json!({"path": "corefs.train[9]", "operation": "delete_entry", "base_revision": 0})),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    let (st, v) = call(&app, "POST", "/records/horse/approve", Some(json!({"base_revision": 1}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "APPROVAL_BLOCKED");
    assert_eq!(v["violations"][0]["code"], "LIST_LENGTH");
    let (st, v) = call(
        &app,
        "POST",
        "/records/horse/edits",
        Some(json!({"path": "corefs.train", "operation": "add_entry", "value": {"text": "foal", "certainty": "Low"}, "base_revision": 1})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let (st, v) = call(&app, "POST", "/records/horse/approve", Some(json!({"base_revision": 2}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["record"]["state"], "approved");
}

#[tokio::test]
async fn regenerate_then_accept_part_of_the_diff() {
    let mut proposal = record_to_proposal(sample_dataset().find("horse").unwrap());
    proposal.corefs[14].text = "foal".into();
    let chat = MockChatClient::default().with_fallback(render_proposal(&[proposal]));
    let (app, state) = app(None, Some(chat));
    let (st, v) = call(&app, "POST", "/records/horse/regenerate", Some(json!({"feedback": "add foal"}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let regen: RegenerateResponse = serde_json::from_value(v).unwrap();
    assert_eq!(regen.round, 2);
    assert_eq!(regen.diff.entries.len(), 2);
    let added = regen.diff.entries.iter().position(|e| e.text == "foal").unwrap();
    // nothing is written until the curator accepts
    assert_eq!(state.snapshot(), sample_dataset());

    let (st, v) = call(&app, "POST", "/records/horse/accept", Some(json!({"diff": regen.diff, "accepted": [added]}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let view: RecordView = serde_json::from_value(v).unwrap();
    assert_eq!(view.record.corefs.train.len() + view.record.corefs.test.len(), 16);
    assert!(view.record.corefs.iter().any(|e| e.text == "foal"));

    // the same diff is now stale
    let (st, _) = call(&app, "POST", "/records/horse/accept", Some(json!({"diff": regen.diff, "accepted": []}))).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let (st, v) = call(&app, "POST", "/records/horse/regenerate", Some(json!({"feedback": "  "}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
}

#[tokio::test]
async fn regenerate_without_client() {
    let (app, _) = app(None, None);
    let (st, v) = call(&app, "POST", "/records/horse/regenerate", Some(json!({"feedback": "more"}))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["code"], "NO_GENERATOR");
}

#[tokio::test]
async fn failed_persist_keeps_memory_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    // a directory where the file should be makes the rename fail
    let path = dir.path().join("ds.json");
    std::fs::create_dir(&path).unwrap();
    std::fs::write(path.join("keep"), b"x").unwrap();
    let (app, state) = app(Some(path), None);
    let (st, v) = call(
        &app,
        "POST",
        "/records/horse/edits",
        Some(json!({"path": "corefs.train[0]", "operation": "set_text", "value": "foal", "base_revision": 0})),
    )
    .await;
    assert_eq!(st, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(v["code"], "PERSIST_FAILED");
    assert_eq!(state.snapshot(), sample_dataset());
}

#[tokio::test]
async fn cors_allows_only_the_ui_origin() {
    let (app, _) = app(None, None);
    for (origin, allowed) in [(ORIGIN, true), ("http://evil.example", false)] {
        let req = Request::builder()
            .method("OPTIONS")
            .uri("/records")
            .header("origin", origin)
            .header("access-control-request-method", "POST")
            .body(Body::empty())
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let header = resp.headers().get("access-control-allow-origin").map(|h| h.to_str().unwrap().to_string());
        assert_eq!(header.as_deref() == Some(origin), allowed, "{origin}: {header:?}");
    }
}
