use std::sync::Arc;
use std::thread;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use claimflow::claims::ClaimRecord;
use claimflow::pack::PackSet;
use claimflow::store::{ContextStore, MemoryStore, StoreError};
use claimflow::{ChatService, Language, UserContext};
use claimflow_server::{app, app_with_timeout};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn service() -> Arc<ChatService> {
    Arc::new(ChatService::new(PackSet::shipped(), Arc::new(MemoryStore::new()), Language::De).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(body: Value) -> Request<Body> {
    Request::post("/api/v1/messages")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn kinds(v: &Value) -> Vec<String> {
    v["actions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["kind"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn health_lists_languages() {
    let (status, body) = call(&app(service()), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "languages": ["de", "en"]}));
}

#[tokio::test]
async fn message_round_trip_starts_with_typing() {
    let app = app(service());
    let (status, body) = call(&app, post(json!({"user_id": "u1", "text": "Mein Handy ist kaputt"}))).await;
    assert_eq!(status, StatusCode::OK);
    let k = kinds(&body);
    assert_eq!(k[0], "typing_on");
    assert!(k.len() >= 2, "{body}");

    let (status, ctx) = call(&app, Request::get("/api/v1/context/u1").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctx["user_id"], "u1");
    assert_eq!(ctx["current_question"], "damage_type");
    assert_eq!(ctx["formality"], "formal");
    assert!(ctx["active_states"]
        .as_array()
        .unwrap()
        .contains(&json!("QUESTIONNAIRE")));
}

#[tokio::test]
async fn choices_are_sent_as_buttons() {
    let app = app(service());
    for text in ["Mein Handy ist kaputt", "Display", "ja"] {
        call(&app, post(json!({"user_id": "u2", "text": text}))).await;
    }
    let (_, body) = call(&app, post(json!({"user_id": "u2", "text": "mein iPhone"}))).await;
    let buttons = body["actions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["kind"] == "send_choices")
        .unwrap_or_else(|| panic!("{body}"));
    assert!(buttons["choices"].as_array().unwrap().len() >= 2);
    let (_, body) = call(&app, post(json!({"user_id": "u2", "choice_id": "iphone_8"}))).await;
    assert_eq!(kinds(&body)[0], "typing_on");
    let (_, ctx) = call(&app, Request::get("/api/v1/context/u2").body(Body::empty()).unwrap()).await;
    assert_eq!(ctx["slots"]["phone_model"], "iPhone 8");
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let app = app(service());
    for body in [
        json!({"user_id": "u3"}),
        json!({"user_id": "u3", "text": "hi", "choice_id": "x"}),
        json!({"user_id": "u3", "text": "hi", "extra": 1}),
        json!({"user_id": "u3", "channel": "telegram", "text": "hi"}),
    ] {
        let (status, res) = call(&app, post(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(res["error"].is_string());
    }
    let (status, _) = call(
        &app,
        Request::get("/api/v1/context/nobody").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Delegates to a memory store but stalls every context load.
struct SlowStore {
    inner: MemoryStore,
    delay: Duration,
}

impl ContextStore for SlowStore {
    fn load_context(&self, user_id: &str, language: Language) -> Result<UserContext, StoreError> {
        thread::sleep(self.delay);
        self.inner.load_context(user_id, language)
    }
    fn peek_context(&self, user_id: &str) -> Result<Option<UserContext>, StoreError> {
        self.inner.peek_context(user_id)
    }
    fn save_context(&self, context: &UserContext) -> Result<(), StoreError> {
        self.inner.save_context(context)
    }
    fn persist_claim(&self, record: &ClaimRecord) -> Result<String, StoreError> {
        self.inner.persist_claim(record)
    }
    fn claims(&self) -> Result<Vec<ClaimRecord>, StoreError> {
        self.inner.claims()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_processing_times_out_with_an_apology() {
    let store = Arc::new(SlowStore {
        inner: MemoryStore::new(),
        delay: Duration::from_millis(400),
    });
    let service = Arc::new(ChatService::new(PackSet::shipped(), store, Language::De).unwrap());
    let app = app_with_timeout(Arc::clone(&service), Duration::from_millis(50));
    let (status, body) = call(&app, post(json!({"user_id": "u4", "text": "Hallo"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kinds(&body), ["send_text"]);
    assert!(
        body["actions"][0]["text"].as_str().unwrap().contains("Entschuldigung"),
        "{body}"
    );
    // the message is still processed
    tokio::time::sleep(Duration::from_millis(800)).await;
    assert_eq!(service.context("u4").unwrap().unwrap().dialog.turn_counter, 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_messages_of_one_user_are_serialized() {
    let app = app(service());
    let mut handles = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            call(&app, post(json!({"user_id": "u5", "text": format!("Hallo {i}")}))).await
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap().0, StatusCode::OK);
    }
    let (_, ctx) = call(&app, Request::get("/api/v1/context/u5").body(Body::empty()).unwrap()).await;
    assert_eq!(ctx["turn"], 8);
}
