//! Stateless scoring service.
//!
//! `POST /v1/score` takes a score request and returns the reward breakdown.
//! A completion that fails to parse is still a 200 with zero metrics; only
//! malformed requests get a 400 with `{"error", "reason"}`.

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use georef::scoring::score_json;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub reason: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub version: &'static str,
}

pub fn router() -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/health", get(health))
}

async fn score(body: Bytes) -> Response {
    match score_json(&body) {
        Ok(breakdown) => Json(breakdown).into_response(),
        Err(e) => (
            StatusCode::BAD_REQUEST,
            Json(ErrorBody {
                error: e.to_string(),
                reason: e.reason(),
            }),
        )
            .into_response(),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
    })
}

pub async fn serve(host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router()).await
}
