//! Read-only HTTP API over one loaded embedding index.
//!
//! Endpoints:
//!
//! ```text
//! GET  /api/images
//! GET  /api/image/{id}
//! POST /api/search        {query_id, k, region?, group_classes?}
//! GET  /api/map?i=ID&j=ID&direction=i|j&render=json|png
//! GET  /api/classmap/{id}?render=json|png
//! GET  /*                 static files, when a directory is configured
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use simviz_core::render::{render_overlay, RenderOptions};
use simviz_core::retrieval::RetrievalError;
use simviz_core::tensor_io::{encode_png, read_image};
use simviz_core::{round_score, EmbeddingIndex, RankedResult, Region, SimError, SimilarityMap};
use thiserror::Error;
use tower_http::services::ServeDir;

pub const DEFAULT_CACHE_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Index(#[from] RetrievalError),
    #[error("static directory {} does not exist", .0.display())]
    StaticDir(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The loaded index plus a bounded cache of pairwise maps keyed by
/// `(over, other)`. Cached maps are exactly what a fresh decompose returns.
pub struct ServiceState {
    index: EmbeddingIndex,
    cache: Option<Mutex<LruCache<(String, String), SimilarityMap>>>,
}

impl ServiceState {
    /// A capacity of zero disables the cache.
    pub fn new(index: EmbeddingIndex, cache_capacity: usize) -> Self {
        Self {
            index,
            cache: NonZeroUsize::new(cache_capacity).map(|n| Mutex::new(LruCache::new(n))),
        }
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn cached_maps(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.lock().unwrap().len())
    }

    fn pair_map(&self, over: &str, other: &str) -> Result<SimilarityMap, ApiError> {
        let key = (over.to_string(), other.to_string());
        if let Some(cache) = &self.cache {
            if let Some(m) = cache.lock().unwrap().get(&key) {
                return Ok(m.clone());
            }
        }
        let map = self.index.pair_map(over, other)?;
        if let Some(cache) = &self.cache {
            cache.lock().unwrap().put(key, map.clone());
        }
        Ok(map)
    }
}

#[derive(Debug)]
enum ApiError {
    UnknownId,
    BadRequest(String),
    SingletonClass,
    Internal(String),
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::UnknownId(_) => ApiError::UnknownId,
            RetrievalError::InvalidK | RetrievalError::InvalidGroupCount => {
                ApiError::BadRequest(e.to_string())
            }
            RetrievalError::Sim(SimError::EmptyClass) => ApiError::SingletonClass,
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::UnknownId => (
                StatusCode::NOT_FOUND,
                serde_json::json!({"error": "unknown_id"}),
            ),
            ApiError::SingletonClass => (
                StatusCode::CONFLICT,
                serde_json::json!({"error": "singleton_class"}),
            ),
            ApiError::BadRequest(msg) => (
                StatusCode::BAD_REQUEST,
                serde_json::json!({"error": "bad_request", "message": msg}),
            ),
            ApiError::Internal(msg) => {
                log::error!("{msg}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    serde_json::json!({"error": "internal", "message": msg}),
                )
            }
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<ServiceState>;

#[derive(Serialize)]
struct ImageEntry<'a> {
    id: &'a str,
    class_label: &'a str,
    thumbnail_url: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionBody {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRequest {
    query_id: String,
    k: usize,
    #[serde(default)]
    region: Option<RegionBody>,
    #[serde(default)]
    group_classes: Option<usize>,
}

#[derive(Serialize)]
struct SearchHit {
    rank: usize,
    id: String,
    class_label: String,
    score: f64,
    map_url: String,
}

#[derive(Serialize)]
struct MapBody<'a> {
    grid_h: usize,
    grid_w: usize,
    total: f64,
    cells: &'a [f64],
}

#[derive(Clone, Copy)]
enum Render {
    Json,
    Png,
}

fn url_query(pairs: &[(&str, &str)]) -> String {
    serde_urlencoded::to_string(pairs).expect("string pairs always encode")
}

fn encode_segment(s: &str) -> String {
    // form encoding writes spaces as '+', which is literal in a path
    url_query(&[("", s)])[1..].replace('+', "%20")
}

pub fn image_url(id: &str) -> String {
    format!("/api/image/{}", encode_segment(id))
}

/// URL of the candidate-side overlay for a search hit.
pub fn map_url(query_id: &str, candidate_id: &str) -> String {
    format!(
        "/api/map?{}",
        url_query(&[
            ("i", query_id),
            ("j", candidate_id),
            ("direction", "j"),
            ("render", "png")
        ])
    )
}

fn hits(query_id: &str, results: Vec<RankedResult>) -> Vec<SearchHit> {
    results
        .into_iter()
        .map(|r| SearchHit {
            map_url: map_url(query_id, &r.id),
            rank: r.rank,
            id: r.id,
            class_label: r.class_label,
            score: round_score(r.score),
        })
        .collect()
}

fn render_param(params: &HashMap<String, String>) -> Result<Render, ApiError> {
    match params.get("render").map(String::as_str) {
        None | Some("json") => Ok(Render::Json),
        Some("png") => Ok(Render::Png),
        Some(other) => Err(ApiError::BadRequest(format!(
            "render must be json or png, not {other:?}"
        ))),
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Default overlay of `map` on the image of record `over`, as PNG bytes.
pub fn overlay_png(
    index: &EmbeddingIndex,
    over: &str,
    map: &SimilarityMap,
) -> Result<Vec<u8>, String> {
    let record = index.record(over).map_err(|e| e.to_string())?;
    let base = read_image(&record.image_ref)
        .map_err(|e| format!("{}: {e}", record.image_ref.display()))?;
    let img = render_overlay(map, &base, &RenderOptions::default()).map_err(|e| e.to_string())?;
    Ok(encode_png(&img))
}

fn map_response(
    state: &ServiceState,
    over: &str,
    map: &SimilarityMap,
    render: Render,
) -> Result<Response, ApiError> {
    Ok(match render {
        Render::Json => Json(MapBody {
            grid_h: map.grid_h(),
            grid_w: map.grid_w(),
            total: map.total(),
            cells: map.cells(),
        })
        .into_response(),
        Render::Png => {
            png_response(overlay_png(&state.index, over, map).map_err(ApiError::Internal)?)
        }
    })
}

async fn list_images(State(state): State<Shared>) -> Response {
    let mut entries: Vec<ImageEntry> = state
        .index
        .records()
        .iter()
        .map(|r| ImageEntry {
            id: &r.id,
            class_label: &r.class_label,
            thumbnail_url: image_url(&r.id),
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(b.id));
    Json(entries).into_response()
}

async fn get_image(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let record = state.index.record(&id)?;
    let img = read_image(&record.image_ref).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(png_response(encode_png(&img)))
}

async fn post_search(State(state): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: SearchRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))?;
    let region = req
        .region
        .map(|r| Region::new(r.x0, r.y0, r.x1, r.y1))
        .transpose()
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let results = simviz_core::query(
        &state.index,
        &req.query_id,
        req.k,
        region.as_ref(),
        req.group_classes,
    )?;
    Ok(Json(hits(&req.query_id, results)).into_response())
}

async fn get_map(
    State(state): State<Shared>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let param = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| ApiError::BadRequest(format!("missing query parameter {name:?}")))
    };
    let (i, j) = (param("i")?, param("j")?);
    let render = render_param(&params)?;
    let (over, other) = match params.get("direction").map(String::as_str) {
        None | Some("i") => (i, j),
        Some("j") => (j, i),
        Some(other) => {
            return Err(ApiError::BadRequest(format!(
                "direction must be i or j, not {other:?}"
            )))
        }
    };
    let map = state.pair_map(over, other)?;
    map_response(&state, over, &map, render)
}

async fn get_classmap(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let render = render_param(&params)?;
    let map = state.index.class_map(&id)?;
    map_response(&state, &id, &map, render)
}

pub fn router(state: Arc<ServiceState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/image/{id}", get(get_image))
        .route("/api/search", post(post_search))
        .route("/api/map", get(get_map))
        .route("/api/classmap/{id}", get(get_classmap))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Loads the index in `index_dir`, binds `127.0.0.1:port` (0 picks a free
/// port), reports the bound address through `on_ready`, and serves until the
/// process exits.
pub fn run(
    index_dir: &Path,
    port: u16,
    static_dir: Option<&Path>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServiceError> {
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            return Err(ServiceError::StaticDir(dir.to_path_buf()));
        }
    }
    let index = EmbeddingIndex::load(index_dir)?;
    log::info!(
        "loaded {} records from {}",
        index.len(),
        index_dir.display()
    );
    let app = router(
        Arc::new(ServiceState::new(index, DEFAULT_CACHE_CAPACITY)),
        static_dir,
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        on_ready(listener.local_addr()?);
        axum::serve(listener, app).await
    })?;
    Ok(())
}
