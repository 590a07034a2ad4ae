//! HTTP service.
//!
//! | route                | body                                  | answer                    |
//! |----------------------|---------------------------------------|---------------------------|
//! | `GET /health`        |                                       | status and encoder id     |
//! | `GET /catalog/steps` |                                       | step definitions          |
//! | `GET /catalog/tables`|                                       | table names               |
//! | `POST /retrieve`     | `{query, k_steps?, k_tables?}`        | suggestions               |
//! | `POST /generate`     | `{query, k_steps?, k_tables?}`        | workflow and validation   |
//!
//! Errors are `{"error": message}` with 400 for malformed requests, 422 for
//! queries the encoder cannot embed, 502 when the remote generator is
//! unavailable and 504 when it times out. A generated text that does not parse
//! is not an error: `/generate` answers 200 with `valid: false` and the raw text.

use std::sync::Arc;

use anyhow::Result;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowrag::catalog::{Catalog, Issue, StepDefinition, TableName, WorkflowDocument};
use flowrag::encoder::{fingerprint_hex, TextEncoder};
use flowrag::generator::{generate, GenerateError, Generator};
use flowrag::pipeline::{assemble_prompt, PipelineError, Retriever, Suggestions};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{load_catalog, load_retriever};
use crate::config::ServiceConfig;

#[derive(Clone)]
pub struct AppState {
    catalog: Arc<Catalog>,
    retriever: Arc<Retriever>,
    generator: Arc<dyn Generator>,
    k_steps: usize,
    k_tables: usize,
}

impl AppState {
    pub fn new(catalog: Arc<Catalog>, retriever: Retriever, generator: Arc<dyn Generator>, k_steps: usize, k_tables: usize) -> Self {
        Self {
            catalog,
            retriever: Arc::new(retriever),
            generator,
            k_steps,
            k_tables,
        }
    }

    /// Loads catalog, encoder and indices; fails on any fingerprint or
    /// catalog mismatch.
    pub fn from_config(config: &ServiceConfig) -> Result<Self> {
        let catalog = Arc::new(load_catalog(&config.data_dir)?);
        let retriever = load_retriever(&config.model, &config.index_dir, &catalog)?;
        let generator: Arc<dyn Generator> = Arc::from(config.generator.instantiate(catalog.clone())?);
        Ok(Self::new(catalog, retriever, generator, config.k_steps, config.k_tables))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Encode(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            PipelineError::Index(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default)]
    pub k_steps: Option<usize>,
    #[serde(default)]
    pub k_tables: Option<usize>,
}

fn parse_request(body: &Bytes) -> Result<QueryRequest, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub workflow: Option<WorkflowDocument>,
    pub suggestions: Suggestions,
    pub hallucinated_steps: Vec<String>,
    pub hallucinated_tables: Vec<String>,
    pub valid: bool,
    pub raw: String,
    pub issues: Vec<Issue>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/catalog/steps", get(catalog_steps))
        .route("/catalog/tables", get(catalog_tables))
        .route("/retrieve", post(retrieve))
        .route("/generate", post(generate_workflow))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "encoder": fingerprint_hex(&s.retriever.encoder().fingerprint()),
        "steps": s.catalog.steps().len(),
        "tables": s.catalog.tables().len(),
    }))
}

async fn catalog_steps(State(s): State<AppState>) -> Json<Vec<StepDefinition>> {
    Json(s.catalog.steps().to_vec())
}

async fn catalog_tables(State(s): State<AppState>) -> Json<Vec<TableName>> {
    Json(s.catalog.tables().to_vec())
}

fn suggestions_for(s: &AppState, req: &QueryRequest) -> Result<Suggestions, ApiError> {
    Ok(s.retriever
        .retrieve_suggestions(&req.query, &s.catalog, req.k_steps.unwrap_or(s.k_steps), req.k_tables.unwrap_or(s.k_tables))?)
}

async fn retrieve(State(s): State<AppState>, body: Bytes) -> Result<Json<Suggestions>, ApiError> {
    let req = parse_request(&body)?;
    Ok(Json(suggestions_for(&s, &req)?))
}

async fn generate_workflow(State(s): State<AppState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req = parse_request(&body)?;
    let suggestions = suggestions_for(&s, &req)?;
    let prompt = assemble_prompt(&suggestions, &req.query, &s.catalog);
    let (generator, catalog) = (s.generator.clone(), s.catalog.clone());
    let outcome = tokio::task::spawn_blocking(move || generate(generator.as_ref(), &prompt, &catalog))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let response = match outcome {
        Ok(g) => GenerateResponse {
            hallucinated_steps: g.report.hallucinated_steps(),
            hallucinated_tables: g.report.hallucinated_tables(),
            valid: g.report.is_clean(),
            workflow: Some(g.document),
            suggestions,
            raw: g.raw,
            issues: g.report.issues,
        },
        Err(GenerateError::MalformedDocument { raw, source }) => GenerateResponse {
            workflow: None,
            suggestions,
            hallucinated_steps: vec![],
            hallucinated_tables: vec![],
            valid: false,
            raw,
            issues: vec![Issue::Parse {
                location: format!("line {} column {}", source.line, source.column),
                message: source.message,
            }],
        },
        Err(e @ GenerateError::RemoteUnavailable(_)) => return Err(ApiError::new(StatusCode::BAD_GATEWAY, e.to_string())),
        Err(e @ GenerateError::RemoteTimeout(_)) => return Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, e.to_string())),
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    };
    Ok(Json(response))
}
