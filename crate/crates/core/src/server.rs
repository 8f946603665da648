//! HTTP service for the analyst console.
//!
//! Handlers are thin: every `/ask` runs the blocking pipeline on tokio's
//! blocking pool against an immutable [`Engine`], so requests never share
//! per-request state. The gateway's rate limiter is the one shared piece.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::assigner::{FinalVerdict, ReasoningTrace};
use crate::evaluator::ENGINE_VERSION;
use crate::gateway::{Transcript, TranscriptEntry};
use crate::images::mime_type;
use crate::pipeline::{Engine, PipelineConfig, PipelineError, Timing};
use crate::prompter::{PromptBundle, PromptError, Segment, Stage};
use crate::retriever::{ExemplarSet, RetrievalConfig, RetrievalError};
use crate::store::normalize;
use crate::taxonomy::{AnswerMode, Category, QuestionSpec, TaxonomyError};

pub struct AppState {
    pub engine: Engine,
    /// Pipeline defaults; per-request overrides apply on top.
    pub pipeline: PipelineConfig,
    pub runs_dir: PathBuf,
    pub transcript: Option<Transcript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageInput {
    /// Reference to an image the server can already resolve.
    Id(String),
    /// Base64-encoded image bytes.
    Upload(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRequest {
    pub image: ImageInput,
    pub question_text: String,
    /// Raw image embedding; required for in-context mode when the image is
    /// not in the query index.
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
    #[serde(default)]
    pub retrieval: Option<RetrievalConfig>,
    #[serde(default)]
    pub cot: Option<bool>,
    #[serde(default)]
    pub selection_stage: Option<bool>,
}

impl AskRequest {
    pub fn effective_config(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        if let Some(r) = &self.retrieval {
            c.retrieval = r.clone();
        }
        if let Some(cot) = self.cot {
            c.cot = cot;
        }
        if let Some(sel) = self.selection_stage {
            c.selection_stage = sel;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub stage: Stage,
    pub fingerprint: String,
    pub cot_enabled: bool,
    pub texts: Vec<String>,
    pub image_refs: Vec<String>,
}

impl From<&PromptBundle> for PromptView {
    fn from(b: &PromptBundle) -> Self {
        let mut texts = Vec::new();
        let mut image_refs = Vec::new();
        for s in &b.segments {
            match s {
                Segment::Text { text } => texts.push(text.clone()),
                Segment::Image { image_ref } => image_refs.push(image_ref.clone()),
            }
        }
        Self {
            stage: b.stage,
            fingerprint: b.fingerprint.clone(),
            cot_enabled: b.cot_enabled,
            texts,
            image_refs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompts {
    pub reasoning: PromptView,
    pub selection: Option<PromptView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseManifest {
    pub engine_version: String,
    pub backend_id: String,
    pub store_size: usize,
    pub registry_hash: String,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub image: String,
    pub question: QuestionSpec,
    pub verdict: FinalVerdict,
    pub reasoning: ReasoningTrace,
    pub exemplars: ExemplarSet,
    pub prompts: Prompts,
    pub timing: Timing,
    pub manifest: ResponseManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            error: error.into(),
            message: message.into(),
            diagnostics: Vec::new(),
        }
    }

    fn bad_request(error: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Taxonomy(TaxonomyError::UnknownQuestion(_)) => {
                Self::bad_request("UnknownQuestion", msg)
            }
            PipelineError::Taxonomy(_) => Self::bad_request("InvalidQuestion", msg),
            PipelineError::Prompt(PromptError::ShapeMismatch(_)) => {
                Self::bad_request("ShapeMismatch", msg)
            }
            PipelineError::Prompt(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Template", msg)
            }
            PipelineError::Retrieval(RetrievalError::MissingQueryEmbedding(_)) => {
                Self::bad_request("MissingEmbedding", msg)
            }
            PipelineError::Retrieval(_) => Self::bad_request("Retrieval", msg),
            PipelineError::Gateway { trace, .. } => {
                let mut err = Self::new(StatusCode::BAD_GATEWAY, "Gateway", msg);
                if let Some(t) = trace {
                    err.diagnostics.push(format!("stage-1 reasoning: {}", t.raw));
                }
                err
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>, cors_origin: &str) -> Router {
    let cors = if cors_origin == "*" {
        CorsLayer::new().allow_origin(Any)
    } else {
        match HeaderValue::from_str(cors_origin) {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => CorsLayer::new(),
        }
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Router::new()
        .route("/ask", post(ask))
        .route("/questions", get(questions))
        .route("/images/{*id}", get(image))
        .route("/health", get(health))
        .route("/runs", get(list_runs))
        .route("/runs/{*id}", get(get_run))
        .route("/spec", get(openapi))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str, cors_origin: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, cors_origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn ask(State(state): State<Arc<AppState>>, Json(req): Json<AskRequest>) -> ApiResult<Json<AskResponse>> {
    // reject before touching the image cache or the model
    let spec = state
        .engine
        .registry
        .classify(&req.question_text)
        .map_err(PipelineError::Taxonomy)?
        .clone();

    let image_ref = match &req.image {
        ImageInput::Id(id) => id.clone(),
        ImageInput::Upload(b64) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request("BadUpload", format!("upload is not base64: {e}")))?;
            state.engine.images.put_upload(bytes)
        }
    };
    let embedding = req
        .embedding
        .as_deref()
        .map(normalize)
        .transpose()
        .map_err(|e| ApiError::bad_request("BadEmbedding", e.to_string()))?;
    let config = req.effective_config(&state.pipeline);

    let st = state.clone();
    let question = req.question_text.clone();
    let image = image_ref.clone();
    let cfg = config.clone();
    let outcome = tokio::task::spawn_blocking(move || st.engine.ask(&image, &question, embedding.as_ref(), &cfg))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;

    debug_assert!(outcome.reasoning_prompt.verify_fingerprint());
    debug_assert!(outcome.selection_prompt.as_ref().is_none_or(PromptBundle::verify_fingerprint));

    if let Some(t) = &state.transcript {
        for exchange in &outcome.exchanges {
            let entry = TranscriptEntry {
                item_id: None,
                exchange: exchange.clone(),
            };
            if let Err(e) = t.append(&entry) {
                tracing::warn!(error = %e, "transcript append failed");
            }
        }
    }

    Ok(Json(AskResponse {
        image: image_ref,
        question: spec,
        verdict: outcome.verdict,
        reasoning: outcome.trace,
        exemplars: outcome.exemplars,
        prompts: Prompts {
            reasoning: PromptView::from(&outcome.reasoning_prompt),
            selection: outcome.selection_prompt.as_ref().map(PromptView::from),
        },
        timing: outcome.timing,
        manifest: ResponseManifest {
            engine_version: ENGINE_VERSION.into(),
            backend_id: state.engine.gateway.backend_id(),
            store_size: state.engine.store.len(),
            registry_hash: state.engine.registry.content_hash().into(),
            pipeline: config,
        },
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEntry {
    pub question_id: String,
    pub text: String,
    pub category: Category,
    pub category_label: String,
    pub answer_mode: AnswerMode,
}

async fn questions(State(state): State<Arc<AppState>>) -> Json<Vec<QuestionEntry>> {
    Json(
        state
            .engine
            .registry
            .entries()
            .iter()
            .map(|q| QuestionEntry {
                question_id: q.question_id.clone(),
                text: q.canonical_text.clone(),
                category: q.category,
                category_label: q.category.label().into(),
                answer_mode: q.answer_mode.clone(),
            })
            .collect(),
    )
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let bytes = state
        .engine
        .images
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("no image `{id}`")))?;
    let mime = mime_type(&id, &bytes);
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": ENGINE_VERSION,
        "backend_id": state.engine.gateway.backend_id(),
        "store_size": state.engine.store.len(),
        "store_images": state.engine.store.unique_images(),
        "registry_size": state.engine.registry.entries().len(),
    }))
}

fn safe_rel(id: &str) -> Option<&Path> {
    let p = Path::new(id);
    let ok = !id.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then_some(p)
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn run_summary(id: &str, dir: &Path) -> Option<Value> {
    if let Some(manifest) = read_json(&dir.join("manifest.json")) {
        let report = read_json(&dir.join("report.json"));
        return Some(json!({
            "id": id,
            "kind": "eval",
            "manifest": manifest,
            "overall": report.and_then(|r| r.get("overall").cloned()),
        }));
    }
    read_json(&dir.join("ablation.json")).map(|_| json!({ "id": id, "kind": "ablation" }))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<Value>> {
    let mut names: Vec<String> = std::fs::read_dir(&state.runs_dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Json(
        names
            .iter()
            .filter_map(|n| run_summary(n, &state.runs_dir.join(n)))
            .collect(),
    )
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let missing = || ApiError::not_found(format!("no run `{id}`"));
    let dir = state.runs_dir.join(safe_rel(&id).ok_or_else(missing)?);
    if let Some(manifest) = read_json(&dir.join("manifest.json")) {
        return Ok(Json(json!({
            "id": id,
            "kind": "eval",
            "manifest": manifest,
            "report": read_json(&dir.join("report.json")),
        })));
    }
    match read_json(&dir.join("ablation.json")) {
        Some(summary) => Ok(Json(json!({ "id": id, "kind": "ablation", "ablation": summary }))),
        None => Err(missing()),
    }
}

async fn openapi() -> Json<Value> {
    Json(openapi_document())
}

/// OpenAPI description of the routes above.
pub fn openapi_document() -> Value {
    let error = json!({ "$ref": "#/components/schemas/Error" });
    let err = |desc: &str| json!({ "description": desc, "content": { "application/json": { "schema": error } } });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "dvqa", "version": ENGINE_VERSION },
        "paths": {
            "/ask": { "post": {
                "summary": "Answer one question about one image",
                "requestBody": { "required": true, "content": { "application/json": {
                    "schema": { "$ref": "#/components/schemas/AskRequest" } } } },
                "responses": {
                    "200": { "description": "Verdict with reasoning, exemplars, prompts and timing",
                             "content": { "application/json": { "schema": { "$ref": "#/components/schemas/AskResponse" } } } },
                    "400": err("UnknownQuestion, ShapeMismatch, MissingEmbedding, BadUpload or BadEmbedding"),
                    "502": err("Model call failed after retries")
                }
            }},
            "/questions": { "get": { "summary": "Registry listing",
                "responses": { "200": { "description": "Question entries with categories and answer spaces" } } } },
            "/images/{id}": { "get": { "summary": "Image bytes",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "Image" }, "404": err("Unknown image") } } },
            "/health": { "get": { "summary": "Store size, backend id and version",
                "responses": { "200": { "description": "Service status" } } } },
            "/runs": { "get": { "summary": "Evaluation and ablation runs",
                "responses": { "200": { "description": "Run summaries" } } } },
            "/runs/{id}": { "get": { "summary": "One run's report and manifest",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "Run" }, "404": err("Unknown run") } } },
            "/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI" } } } }
        },
        "components": { "schemas": {
            "Error": { "type": "object", "required": ["error", "message"], "properties": {
                "error": { "type": "string" }, "message": { "type": "string" },
                "diagnostics": { "type": "array", "items": { "type": "string" } } } },
            "AskRequest": { "type": "object", "required": ["image", "question_text"], "properties": {
                "image": { "oneOf": [
                    { "type": "object", "required": ["id"], "properties": { "id": { "type": "string" } } },
                    { "type": "object", "required": ["upload"], "properties": { "upload": { "type": "string", "format": "byte" } } } ] },
                "question_text": { "type": "string" },
                "embedding": { "type": "array", "items": { "type": "number" } },
                "retrieval": { "type": "object", "properties": {
                    "mode": { "type": "string", "enum": ["zero_shot", "icl"] },
                    "pool_limit_per_choice": { "oneOf": [ { "type": "integer", "minimum": 0 }, { "type": "string", "enum": ["unlimited"] } ] },
                    "exemplars_per_choice": { "type": "integer" },
                    "counting_top_k": { "type": "integer" },
                    "pool_sample_seed": { "type": "integer" } } },
                "cot": { "type": "boolean" },
                "selection_stage": { "type": "boolean" } } },
            "AskResponse": { "type": "object", "properties": {
                "image": { "type": "string" },
                "question": { "type": "object" },
                "verdict": { "type": "object" },
                "reasoning": { "type": "object" },
                "exemplars": { "type": "object" },
                "prompts": { "type": "object" },
                "timing": { "type": "object" },
                "manifest": { "type": "object" } } }
        }}
    })
}
