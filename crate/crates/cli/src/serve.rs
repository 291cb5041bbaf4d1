//! HTTP service: video catalog, media with range support, annotation store
//! and agreement. No authentication; meant for a trusted network.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use affectlab::annotation::{parse_trace, resample_to_frames, AnnotationTrace, Dimension};
use affectlab::metrics::{agreement_matrix, AgreementMetric};
use anyhow::{anyhow, bail, Context};
use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower::ServiceExt;
use tower_http::services::{ServeDir, ServeFile};

use crate::{CliError, CliResult, ServeArgs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Video {
    pub id: String,
    #[serde(skip)]
    pub path: PathBuf,
    pub fps: f64,
    pub frame_count: usize,
}

/// Reads `id,path,fps,frame_count` lines; a leading header line is allowed.
/// Relative paths resolve against the catalog's directory.
pub fn load_catalog(path: &Path) -> anyhow::Result<BTreeMap<String, Video>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (idx == 0 && line.starts_with("id,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, file, fps, frames] = fields[..] else {
            bail!("catalog line {}: expected id,path,fps,frame_count", idx + 1);
        };
        let fps: f64 = fps.parse().ok().filter(|f: &f64| *f > 0.0).ok_or_else(|| anyhow!("catalog line {}: bad fps", idx + 1))?;
        let frame_count: usize = frames.parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("catalog line {}: bad frame count", idx + 1))?;
        if !safe_component(id) {
            bail!("catalog line {}: id '{id}' is not a plain name", idx + 1);
        }
        let video = Video { id: id.to_string(), path: base.join(file), fps, frame_count };
        if out.insert(id.to_string(), video).is_some() {
            bail!("catalog line {}: duplicate id '{id}'", idx + 1);
        }
    }
    Ok(out)
}

/// Ids become file and directory names in the store.
fn safe_component(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug)]
pub struct ServeState {
    pub catalog: BTreeMap<String, Video>,
    pub store: PathBuf,
    write_lock: Mutex<()>,
}

impl ServeState {
    pub fn new(catalog: BTreeMap<String, Video>, store: PathBuf) -> Self {
        Self { catalog, store, write_lock: Mutex::new(()) }
    }

    fn video(&self, id: &str) -> Result<&Video, ApiError> {
        self.catalog.get(id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown video '{id}'")))
    }

    fn trace_path(&self, video: &str, annotator: &str, dimension: Dimension) -> PathBuf {
        self.store.join(video).join(format!("{annotator}_{dimension}.csv"))
    }

    async fn traces(&self, video: &str) -> Result<Vec<AnnotationTrace>, ApiError> {
        let dir = self.store.join(video);
        let mut out = Vec::new();
        let mut entries = match tokio::fs::read_dir(&dir).await {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(ApiError::internal(e)),
        };
        let mut paths = Vec::new();
        while let Some(entry) = entries.next_entry().await.map_err(ApiError::internal)? {
            let p = entry.path();
            if p.extension().is_some_and(|x| x == "csv") {
                paths.push(p);
            }
        }
        paths.sort();
        for p in paths {
            let text = tokio::fs::read_to_string(&p).await.map_err(ApiError::internal)?;
            out.push(parse_trace(&text).map_err(|e| ApiError::internal(format!("{}: {e}", p.display())))?);
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    fn internal(e: impl std::fmt::Display) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, self.1).into_response()
    }
}

type Shared = Arc<ServeState>;

async fn list_videos(State(s): State<Shared>) -> Json<Vec<Video>> {
    Json(s.catalog.values().cloned().collect())
}

async fn media(State(s): State<Shared>, UrlPath(id): UrlPath<String>, req: Request) -> Result<Response, ApiError> {
    let video = s.video(&id)?;
    let res = ServeFile::new(&video.path).oneshot(req).await.map_err(ApiError::internal)?;
    Ok(res.map(Body::new))
}

#[derive(Debug, Deserialize)]
struct PostQuery {
    overwrite: Option<String>,
}

#[derive(Debug, Serialize)]
struct TraceInfo {
    video: String,
    annotator: String,
    dimension: String,
    samples: usize,
}

impl From<&AnnotationTrace> for TraceInfo {
    fn from(t: &AnnotationTrace) -> Self {
        Self {
            video: t.video_id.clone(),
            annotator: t.annotator_id.clone(),
            dimension: t.dimension.to_string(),
            samples: t.samples.len(),
        }
    }
}

async fn post_annotation(State(s): State<Shared>, Query(q): Query<PostQuery>, body: String) -> Result<Response, ApiError> {
    let trace = parse_trace(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    s.video(&trace.video_id)?;
    if !safe_component(&trace.annotator_id) {
        return Err(ApiError::bad_request(format!("annotator id '{}' is not a plain name", trace.annotator_id)));
    }
    let overwrite = matches!(q.overwrite.as_deref(), Some("1" | "true"));
    let path = s.trace_path(&trace.video_id, &trace.annotator_id, trace.dimension);
    let _guard = s.write_lock.lock().await;
    if !overwrite && tokio::fs::try_exists(&path).await.map_err(ApiError::internal)? {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("{} already has a {} trace for '{}'", trace.annotator_id, trace.dimension, trace.video_id),
        ));
    }
    let dir = path.parent().expect("trace path has a parent");
    tokio::fs::create_dir_all(dir).await.map_err(ApiError::internal)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("trace")));
    tokio::fs::write(&tmp, trace.serialize()).await.map_err(ApiError::internal)?;
    tokio::fs::rename(&tmp, &path).await.map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(TraceInfo::from(&trace))).into_response())
}

#[derive(Debug, Deserialize)]
struct VideoQuery {
    video: Option<String>,
}

async fn list_annotations(State(s): State<Shared>, Query(q): Query<VideoQuery>) -> Result<Json<Vec<TraceInfo>>, ApiError> {
    let video = q.video.ok_or_else(|| ApiError::bad_request("missing 'video' parameter"))?;
    s.video(&video)?;
    Ok(Json(s.traces(&video).await?.iter().map(TraceInfo::from).collect()))
}

async fn get_annotation(
    State(s): State<Shared>,
    UrlPath((video, annotator, dimension)): UrlPath<(String, String, String)>,
) -> Result<Response, ApiError> {
    s.video(&video)?;
    let dim: Dimension = dimension.parse().map_err(ApiError::bad_request)?;
    if !safe_component(&annotator) {
        return Err(ApiError::bad_request("bad annotator id"));
    }
    match tokio::fs::read_to_string(s.trace_path(&video, &annotator, dim)).await {
        Ok(text) => Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError(StatusCode::NOT_FOUND, format!("no {dim} trace by '{annotator}' for '{video}'")))
        }
        Err(e) => Err(ApiError::internal(e)),
    }
}

#[derive(Debug, Deserialize)]
struct AgreementQuery {
    video: Option<String>,
    dimension: Option<String>,
    metric: Option<String>,
}

async fn agreement(State(s): State<Shared>, Query(q): Query<AgreementQuery>) -> Result<Response, ApiError> {
    let id = q.video.ok_or_else(|| ApiError::bad_request("missing 'video' parameter"))?;
    let dim: Dimension = q
        .dimension
        .ok_or_else(|| ApiError::bad_request("missing 'dimension' parameter"))?
        .parse()
        .map_err(ApiError::bad_request)?;
    let metric: AgreementMetric = q.metric.as_deref().unwrap_or("ccc").parse().map_err(ApiError::bad_request)?;
    let video = s.video(&id)?;
    let traces: Vec<AnnotationTrace> = s.traces(&id).await?.into_iter().filter(|t| t.dimension == dim).collect();
    if traces.len() < 2 {
        return Err(ApiError::bad_request(format!("need ≥ 2 annotators, '{id}' has {} for {dim}", traces.len())));
    }
    let ids: Vec<String> = traces.iter().map(|t| t.annotator_id.clone()).collect();
    let series: Vec<Vec<f64>> = traces.iter().map(|t| resample_to_frames(t, video.fps, video.frame_count).values).collect();
    let m = agreement_matrix(&series, &ids, metric).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], m.to_csv()).into_response())
}

pub fn router(state: ServeState, ui: Option<&Path>) -> Router {
    let app = Router::new()
        .route("/api/videos", get(list_videos))
        .route("/media/{id}", get(media))
        .route("/api/annotations", get(list_annotations).post(post_annotation))
        .route("/api/annotations/{video}/{annotator}/{dimension}", get(get_annotation))
        .route("/api/agreement", get(agreement))
        .with_state(Arc::new(state));
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves `app` on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

pub fn run(a: &ServeArgs) -> CliResult {
    let addr: SocketAddr = a.addr.parse().map_err(|_| CliError::Usage(format!("--addr: cannot parse '{}'", a.addr)))?;
    let catalog = load_catalog(&a.catalog)?;
    std::fs::create_dir_all(&a.store).with_context(|| format!("creating {}", a.store.display()))?;
    let app = router(ServeState::new(catalog, a.store.clone()), a.ui.as_deref());
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr().context("local address")?);
        serve(listener, app).await.context("serving")
    })?;
    Ok(())
}
