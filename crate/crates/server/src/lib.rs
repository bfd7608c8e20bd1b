//! HTTP front end and command line entry points.

pub mod cli;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use claimflow::messaging::{normalize_incoming, MessageIds, RawPayload, WebOutbound};
use claimflow::responder::{Formality, Polarity};
use claimflow::{Capabilities, ChatService, Language, UserContext};
use serde::Serialize;

pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone)]
struct AppState {
    service: Arc<ChatService>,
    ids: Arc<MessageIds>,
    timeout: Duration,
}

pub fn app(service: Arc<ChatService>) -> Router {
    app_with_timeout(service, REQUEST_TIMEOUT)
}

pub fn app_with_timeout(service: Arc<ChatService>, timeout: Duration) -> Router {
    let state = AppState {
        service,
        ids: Arc::new(MessageIds::new()),
        timeout,
    };
    Router::new()
        .route("/api/v1/messages", post(post_message))
        .route("/api/v1/context/:user_id", get(get_context))
        .route("/healthz", get(healthz))
        .with_state(state)
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn post_message(State(state): State<AppState>, body: String) -> Response {
    let message = match normalize_incoming(RawPayload::WebJson(&body), "web", Utc::now(), &state.ids) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let user = message.user_id.clone();
    let pending = state.service.submit(message, Capabilities::WEB);
    let work = tokio::task::spawn_blocking(move || pending.process());
    let actions = match tokio::time::timeout(state.timeout, work).await {
        Ok(Ok(actions)) => actions,
        Ok(Err(e)) => {
            tracing::error!(user = %user, error = %e, "worker failed");
            state.service.apology(&user)
        }
        Err(_) => {
            // the worker keeps running and still saves its result
            tracing::warn!(user = %user, "request timed out");
            state.service.apology(&user)
        }
    };
    Json(WebOutbound::from_actions(&actions)).into_response()
}

/// Read-only view of a user's context.
#[derive(Debug, Serialize)]
pub struct ContextSummary {
    pub user_id: String,
    pub language: Language,
    pub formality: Formality,
    pub mood: Polarity,
    pub first_name: Option<String>,
    pub turn: u64,
    pub active_states: Vec<String>,
    pub current_question: Option<String>,
    pub slots: BTreeMap<String, String>,
    pub completed_claims: Vec<String>,
    pub last_message_at: Option<DateTime<Utc>>,
}

impl From<&UserContext> for ContextSummary {
    fn from(ctx: &UserContext) -> Self {
        let frame = ctx.frame.as_ref();
        ContextSummary {
            user_id: ctx.user_id.clone(),
            language: ctx.profile.language,
            formality: ctx.profile.formality,
            mood: ctx.profile.mood,
            first_name: ctx.profile.first_name.clone(),
            turn: ctx.dialog.turn_counter,
            active_states: ctx.dialog.active_states.names(),
            current_question: frame.and_then(|f| f.current.clone()),
            slots: frame
                .map(|f| f.slots.iter().map(|(k, v)| (k.clone(), v.canonical())).collect())
                .unwrap_or_default(),
            completed_claims: ctx.completed_claims.clone(),
            last_message_at: ctx.transcript.last().map(|e| e.at),
        }
    }
}

async fn get_context(State(state): State<AppState>, Path(user_id): Path<String>) -> Response {
    match state.service.context(&user_id) {
        Ok(Some(ctx)) => Json(ContextSummary::from(&ctx)).into_response(),
        Ok(None) => error(StatusCode::NOT_FOUND, format!("no context for '{user_id}'")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    languages: Vec<Language>,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        languages: state.service.languages().collect(),
    })
}
