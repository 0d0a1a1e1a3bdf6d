//! HTTP routes. Bodies are JSON; explanation documents are served as their
//! stored canonical bytes. Engine work runs on the blocking pool.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;

use crate::{ExplainRequest, Service, ServiceError, ServiceResult, WhatIfRequest};

/// Uploads carry whole CSV datasets.
const MAX_BODY_BYTES: usize = 64 << 20;

fn json_response(status: StatusCode, body: String) -> Response {
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .expect("static response parts")
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, body.to_string())
    }
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    json_response(
        StatusCode::OK,
        serde_json::to_string(value).expect("responses contain only finite numbers"),
    )
}

async fn blocking<T, F>(f: F) -> ServiceResult<T>
where
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Engine(format!("worker failed: {e}")))?
}

async fn post_schema(State(svc): State<Arc<Service>>, body: String) -> ServiceResult<Response> {
    let r = blocking(move || svc.register_schema(&body)).await?;
    Ok(ok_json(&r))
}

async fn post_dataset(State(svc): State<Arc<Service>>, body: String) -> ServiceResult<Response> {
    let r = blocking(move || svc.register_dataset(&body)).await?;
    Ok(ok_json(&r))
}

async fn post_model(State(svc): State<Arc<Service>>, body: String) -> ServiceResult<Response> {
    let r = blocking(move || svc.register_model(&body)).await?;
    Ok(ok_json(&r))
}

async fn post_explain(State(svc): State<Arc<Service>>, body: String) -> ServiceResult<Response> {
    let r = blocking(move || {
        let req: ExplainRequest = serde_json::from_str(&body)?;
        svc.handle_explain(&req)
    })
    .await?;
    Ok(ok_json(&r))
}

async fn get_explanation(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ServiceResult<Response> {
    let doc = blocking(move || svc.explanation(&id)).await?;
    Ok(json_response(StatusCode::OK, doc))
}

async fn post_whatif(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: String,
) -> ServiceResult<Response> {
    let r = blocking(move || {
        let mut req: WhatIfRequest = if body.trim().is_empty() {
            WhatIfRequest::default()
        } else {
            serde_json::from_str(&body)?
        };
        req.explanation = id;
        svc.handle_whatif(&req)
    })
    .await?;
    Ok(ok_json(&r))
}

async fn healthz() -> Response {
    ok_json(&serde_json::json!({
        "status": "ok",
        "engine": causex_core::report::ENGINE_NAME,
        "version": causex_core::report::ENGINE_VERSION,
    }))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/schemas", post(post_schema))
        .route("/datasets", post(post_dataset))
        .route("/models", post(post_model))
        .route("/explain", post(post_explain))
        .route("/explanations/{id}", get(get_explanation))
        .route("/explanations/{id}/whatif", post(post_whatif))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
