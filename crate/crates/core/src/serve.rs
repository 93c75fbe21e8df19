//! Minimal HTTP front end over a loaded model.
//!
//! `GET /health` answers `ok`; `GET /recommend?papers=p1,p2&k=5` answers with
//! a [`Recommendation`] as JSON, or `400` with `{"error": ...}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::recommender::{Model, ScoredDataset};

pub const DEFAULT_K: usize = 5;
/// Topics reported per query.
pub const QUERY_TOPICS: usize = 4;
/// Words reported per topic.
pub const TOPIC_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicSummary {
    pub topic: usize,
    pub weight: f64,
    pub top_words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub query: Vec<String>,
    pub results: Vec<ScoredDataset>,
    pub topics: Vec<TopicSummary>,
}

/// Ranked datasets plus the query's leading topics and their top words.
pub fn recommend<S: AsRef<str>>(model: &Model, papers: &[S], k: usize) -> Result<Recommendation> {
    let ranked = model.rank(papers, k)?;
    let topics = model
        .query_topics(papers, QUERY_TOPICS)?
        .into_iter()
        .map(|(topic, weight)| {
            let profile = model.topic_profile(topic, TOPIC_WORDS)?;
            Ok(TopicSummary {
                topic,
                weight,
                top_words: profile.words.into_iter().map(|(w, _)| w).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Recommendation {
        query: ranked.query,
        results: ranked.results,
        topics,
    })
}

fn bad_request(message: String) -> Response {
    let body = serde_json::json!({ "error": message });
    (StatusCode::BAD_REQUEST, Json(body)).into_response()
}

async fn health() -> &'static str {
    "ok"
}

async fn recommend_handler(State(model): State<Arc<Model>>, Query(params): Query<HashMap<String, String>>) -> Response {
    let papers: Vec<&str> = params
        .get("papers")
        .map(|p| p.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    if papers.is_empty() {
        return bad_request("the papers parameter is empty".into());
    }
    let k = match params.get("k").map(|k| k.parse::<usize>()) {
        None => DEFAULT_K.min(model.num_datasets()),
        Some(Ok(k)) => k,
        Some(Err(_)) => return bad_request(format!("k must be a positive integer, got {:?}", params["k"])),
    };
    match recommend(&model, &papers, k) {
        Ok(rec) => Json(rec).into_response(),
        Err(e) => bad_request(e.to_string()),
    }
}

pub fn router(model: Arc<Model>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/recommend", get(recommend_handler))
        .with_state(model)
}

/// Serves until the process is stopped.
pub async fn serve_on(listener: tokio::net::TcpListener, model: Arc<Model>) -> Result<()> {
    axum::serve(listener, router(model)).await.map_err(Error::Io)
}

/// Binds `addr` and serves on a fresh multi-threaded runtime.
pub fn run(model: Model, addr: SocketAddr) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        serve_on(listener, Arc::new(model)).await
    })
}
