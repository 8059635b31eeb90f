//! HTTP interface: `POST /classify`, `GET /models`, `GET /health`.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use toxscope::attribution::{explain, rank_tokens, AttributionError, DEFAULT_STEPS};
use toxscope::text::{normalize_text, tokenize};
use toxscope::Label;

use crate::ranker::{RankSource, RankedWord, Ranker};
use crate::registry::{LoadedModel, ModelSummary, Registry};

pub const MAX_TEXT_CHARS: usize = 10_000;
pub const MAX_STEPS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub model_id: String,
    pub label: Label,
    pub confidence: f64,
    /// Indexed explicit, implicit, none.
    pub probabilities: [f64; 3],
    pub tokens: Vec<TokenScore>,
    pub ranked_tokens: Vec<RankedWord>,
    pub ranker_source: RankSource,
    pub steps: usize,
    pub completeness_gap: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    pub fn model_not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "model_not_found",
            format!("no model registered as {id:?}"),
        )
    }

    pub fn invalid_text(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_text", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ApiErrorBody {
            code: self.code.to_string(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub ranker: Arc<Ranker>,
}

impl AppState {
    pub fn new(registry: Registry, ranker: Ranker) -> Self {
        Self {
            registry: Arc::new(registry),
            ranker: Arc::new(ranker),
        }
    }
}

/// Checks the request shape and returns the step count to use.
pub fn validate(request: &ClassifyRequest) -> Result<usize, ApiError> {
    let chars = request.text.chars().count();
    if chars > MAX_TEXT_CHARS {
        return Err(ApiError::invalid_text(format!(
            "text has {chars} characters, the limit is {MAX_TEXT_CHARS}"
        )));
    }
    if tokenize(&normalize_text(&request.text)).is_empty() {
        return Err(ApiError::invalid_text("text is empty after normalization"));
    }
    let steps = request.steps.unwrap_or(DEFAULT_STEPS);
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_steps",
            format!("steps must be between 1 and {MAX_STEPS}, got {steps}"),
        ));
    }
    Ok(steps)
}

/// Prediction and attribution for one text; everything but the external
/// ranking. CPU-bound.
pub fn classify_with(
    model_id: &str,
    loaded: &LoadedModel,
    text: &str,
    steps: usize,
) -> Result<(ClassifyResponse, Vec<RankedWord>), ApiError> {
    let (prediction, attribution) =
        explain(&loaded.model, &loaded.vocab, text, steps).map_err(|e| match e {
            AttributionError::EmptyInput => {
                ApiError::invalid_text("text is empty after normalization")
            }
            e => ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "attribution_error",
                e.to_string(),
            ),
        })?;
    let ranked: Vec<RankedWord> = rank_tokens(&attribution)
        .into_iter()
        .map(RankedWord::from)
        .collect();
    let tokens = attribution
        .tokens
        .iter()
        .zip(&attribution.normalized_scores)
        .map(|(token, &score)| TokenScore {
            token: token.clone(),
            score,
        })
        .collect();
    let response = ClassifyResponse {
        model_id: model_id.to_string(),
        label: prediction.label,
        confidence: prediction.confidence,
        probabilities: prediction.probabilities,
        tokens,
        ranked_tokens: ranked.clone(),
        ranker_source: RankSource::Stub,
        steps,
        completeness_gap: attribution.completeness_gap,
        latency_ms: 0.0,
    };
    Ok((response, ranked))
}

pub async fn handle_classify(
    state: &AppState,
    request: ClassifyRequest,
) -> Result<ClassifyResponse, ApiError> {
    let started = Instant::now();
    let steps = validate(&request)?;
    let entry = state
        .registry
        .get(&request.model_id)
        .ok_or_else(|| ApiError::model_not_found(&request.model_id))?;
    let loaded = entry.loaded.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_ready",
            format!("model {:?} failed to load", request.model_id),
        )
    })?;

    let ClassifyRequest { text, model_id, .. } = request;
    let (mut response, fallback, text) = tokio::task::spawn_blocking(move || {
        classify_with(&model_id, &loaded, &text, steps).map(|(r, f)| (r, f, text))
    })
    .await
    .map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal_error",
            e.to_string(),
        )
    })??;

    let (ranked, source) = state.ranker.rank(&text, fallback).await;
    response.ranked_tokens = ranked;
    response.ranker_source = source;
    response.latency_ms = started.elapsed().as_secs_f64() * 1e3;
    tracing::info!(
        model_id = %response.model_id,
        tokens = response.tokens.len(),
        steps,
        latency_ms = response.latency_ms,
        "classified"
    );
    Ok(response)
}

async fn classify_route(
    State(state): State<AppState>,
    body: Result<Json<ClassifyRequest>, JsonRejection>,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let Json(request) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))?;
    handle_classify(&state, request).await.map(Json)
}

async fn models_route(State(state): State<AppState>) -> Json<Vec<ModelSummary>> {
    Json(state.registry.list_models())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthModel {
    pub model_id: String,
    pub ready: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models: Vec<HealthModel>,
}

async fn health_route(State(state): State<AppState>) -> Json<Health> {
    let models = state
        .registry
        .list_models()
        .into_iter()
        .map(|m| HealthModel {
            model_id: m.model_id,
            ready: m.ready,
        })
        .collect();
    Json(Health {
        status: "ok".to_string(),
        models,
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/classify", post(classify_route))
        .route("/models", get(models_route))
        .route("/health", get(health_route))
        .with_state(state)
}
