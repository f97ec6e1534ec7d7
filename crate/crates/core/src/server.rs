//! HTTP review service: the edit-pair queue under `/api/pairs`, the
//! preference queue under `/api/preference`, blobs under `/blobs`, and
//! optional static UI assets for everything else.
//!
//! Both queues sit behind a mutex, so verdicts and leases are applied one at
//! a time. Each mutation is written back to the queue manifest before the
//! response goes out, and [`ReviewServer::shutdown`] saves once more.

use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiny_http::{Method, Request};

use crate::data::{BlobStore, ImageRef, ManifestError};
use crate::editset::{
    Clock, PreferenceCandidate, PreferenceQueue, Queue, ReviewError, ReviewQueue, Reviewable,
    SystemClock,
};
use crate::httputil::{
    bytes_response, error_response, json_response, read_json, split_url, HttpResponse,
    ServerHandle,
};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {bind}: {source}")]
    BindFailure {
        bind: String,
        source: std::io::Error,
    },
    #[error("review queue manifest {0} not found")]
    MissingQueue(PathBuf),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Where the queues live and how to serve them.
#[derive(Debug, Clone)]
pub struct ReviewServerConfig {
    pub bind: String,
    pub workers: usize,
    pub lease_secs: u64,
    pub pair_queue: PathBuf,
    /// Loaded when present; otherwise `preference_seed` is queued fresh.
    pub preference_queue: PathBuf,
    pub preference_seed: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

struct Persisted<T: Reviewable> {
    queue: Mutex<Queue<T>>,
    path: PathBuf,
}

impl<T: Reviewable> Persisted<T> {
    fn save(&self, q: &Queue<T>) -> Result<(), ManifestError> {
        q.save(&self.path).map(|_| ())
    }
}

struct State {
    pairs: Persisted<crate::editset::EditPair>,
    preference: Persisted<PreferenceCandidate>,
    store: Arc<BlobStore>,
    static_dir: Option<PathBuf>,
}

pub struct ReviewServer {
    handle: ServerHandle,
    state: Arc<State>,
}

impl ReviewServer {
    pub fn base_url(&self) -> String {
        self.handle.base_url()
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.handle.addr()
    }

    /// Stops the workers and writes both queues, leases included.
    pub fn shutdown(self) -> Result<(), ManifestError> {
        self.handle.shutdown();
        self.state.persist_all()
    }

    /// Blocks for the lifetime of the server.
    pub fn join(self) {
        self.handle.join();
    }
}

impl State {
    fn persist_all(&self) -> Result<(), ManifestError> {
        let q = self.pairs.queue.lock().expect("pair queue");
        self.pairs.save(&q)?;
        drop(q);
        let q = self.preference.queue.lock().expect("preference queue");
        self.preference.save(&q)
    }
}

/// Loads the queues and starts serving. A missing pair queue is an error;
/// a missing preference queue starts from the seed candidates, if any.
pub fn serve_review(
    cfg: &ReviewServerConfig,
    store: Arc<BlobStore>,
    clock: Arc<dyn Clock>,
) -> Result<ReviewServer, ServeError> {
    if !cfg.pair_queue.exists() {
        return Err(ServeError::MissingQueue(cfg.pair_queue.clone()));
    }
    let pairs = ReviewQueue::load(&cfg.pair_queue, cfg.lease_secs, clock.clone())?;
    let preference = if cfg.preference_queue.exists() {
        PreferenceQueue::load(&cfg.preference_queue, cfg.lease_secs, clock)?
    } else {
        let mut q = PreferenceQueue::new(cfg.lease_secs, clock);
        if let Some(seed) = cfg.preference_seed.as_deref().filter(|p| p.exists()) {
            let candidates: Vec<PreferenceCandidate> = crate::data::read_manifest(seed)?;
            q.enqueue(candidates);
        }
        q
    };
    let state = Arc::new(State {
        pairs: Persisted {
            queue: Mutex::new(pairs),
            path: cfg.pair_queue.clone(),
        },
        preference: Persisted {
            queue: Mutex::new(preference),
            path: cfg.preference_queue.clone(),
        },
        store,
        static_dir: cfg.static_dir.clone(),
    });
    let handler_state = state.clone();
    let handle = ServerHandle::spawn(&cfg.bind, cfg.workers, move |req| {
        let (req, resp) = route(&handler_state, req);
        let _ = req.respond(resp);
    })
    .map_err(|source| ServeError::BindFailure {
        bind: cfg.bind.clone(),
        source,
    })?;
    tracing::info!(url = %handle.base_url(), "review server listening");
    Ok(ReviewServer { handle, state })
}

/// Convenience for tests and the CLI: the system clock.
pub fn system_clock() -> Arc<dyn Clock> {
    Arc::new(SystemClock)
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    verdict: String,
    reviewer: String,
}

/// A leased item plus links to its two images.
#[derive(Debug, Serialize)]
struct Leased<'a, T> {
    item: &'a T,
    images: NamedRefs<'a>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum NamedRefs<'a> {
    Edit {
        source: ImageLink<'a>,
        target: ImageLink<'a>,
    },
    Preference {
        a: ImageLink<'a>,
        b: ImageLink<'a>,
    },
}

#[derive(Debug, Serialize)]
struct ImageLink<'a> {
    #[serde(flatten)]
    image: &'a ImageRef,
    url: String,
}

fn blob_url(image: &ImageRef) -> String {
    format!("/blobs/{}", image.blob_id)
}

fn link(image: &ImageRef) -> ImageLink<'_> {
    ImageLink {
        image,
        url: blob_url(image),
    }
}

/// Per-queue behaviour the generic handlers need.
trait Served: Reviewable {
    fn named(&self) -> NamedRefs<'_>;
    /// Image selected by a `/images/{which}` suffix.
    fn image_named(&self, which: &str) -> Option<&ImageRef>;
}

impl Served for crate::editset::EditPair {
    fn named(&self) -> NamedRefs<'_> {
        NamedRefs::Edit {
            source: link(&self.source),
            target: link(&self.target),
        }
    }

    fn image_named(&self, which: &str) -> Option<&ImageRef> {
        match which {
            "source" => Some(&self.source),
            "target" => Some(&self.target),
            _ => None,
        }
    }
}

impl Served for PreferenceCandidate {
    fn named(&self) -> NamedRefs<'_> {
        NamedRefs::Preference {
            a: link(&self.image_a),
            b: link(&self.image_b),
        }
    }

    fn image_named(&self, which: &str) -> Option<&ImageRef> {
        match which {
            "a" => Some(&self.image_a),
            "b" => Some(&self.image_b),
            _ => None,
        }
    }
}

fn review_error(e: ReviewError) -> HttpResponse {
    let (status, code) = match &e {
        ReviewError::UnknownPair(_) => (404, "unknown_pair"),
        ReviewError::NothingPending => (404, "nothing_pending"),
        ReviewError::AlreadyReviewed(_) => (409, "already_reviewed"),
        ReviewError::IllegalTransition { .. } => (409, "illegal_transition"),
        ReviewError::LeasedToOther { .. } => (409, "leased_to_other"),
        ReviewError::UnknownVerdict(_) => (400, "unknown_verdict"),
        ReviewError::EmptyReviewer => (400, "empty_reviewer"),
    };
    error_response(status, code, e.to_string())
}

fn persist_failed(e: ManifestError) -> HttpResponse {
    tracing::error!(error = %e, "failed to persist review queue");
    error_response(500, "persist_failed", e.to_string())
}

fn route(state: &State, mut req: Request) -> (Request, HttpResponse) {
    let url = req.url().to_string();
    let (path, query) = split_url(&url);
    let method = req.method().clone();
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    let resp = match (method, segments.as_slice()) {
        (Method::Get, ["api", "stats"]) => stats(&state.pairs),
        (Method::Get, ["api", "preference", "stats"]) => stats(&state.preference),
        (Method::Get, ["api", "pairs", "export"]) => {
            let q = state.pairs.queue.lock().expect("pair queue");
            json_response(200, &q.export_approved())
        }
        (Method::Get, ["api", "preference", "export"]) => {
            let q = state.preference.queue.lock().expect("preference queue");
            json_response(200, &q.export_preferences())
        }
        (Method::Get, ["api", "pairs", "next"]) => next(&state.pairs, &query),
        (Method::Get, ["api", "preference", "next"]) => next(&state.preference, &query),
        (Method::Post, ["api", "pairs", id, "verdict"]) => verdict(&state.pairs, id, &mut req),
        (Method::Post, ["api", "preference", id, "verdict"]) => {
            verdict(&state.preference, id, &mut req)
        }
        (Method::Get, ["api", "pairs", id, "images"]) => images(&state.pairs, id),
        (Method::Get, ["api", "preference", id, "images"]) => images(&state.preference, id),
        (Method::Get, ["api", "pairs", id, "images", which]) => {
            image_bytes(state, &state.pairs, id, which)
        }
        (Method::Get, ["api", "preference", id, "images", which]) => {
            image_bytes(state, &state.preference, id, which)
        }
        (Method::Get, ["blobs", blob_id]) => blob(state, blob_id),
        (Method::Get, ["api", ..]) | (_, ["api", ..]) => {
            error_response(404, "not_found", format!("no route for {path}"))
        }
        (Method::Get, _) => static_file(state, path),
        _ => error_response(405, "method_not_allowed", "method not allowed"),
    };
    (req, resp)
}

fn stats<T: Served>(p: &Persisted<T>) -> HttpResponse {
    let q = p.queue.lock().expect("queue");
    json_response(200, &q.stats())
}

fn next<T: Served>(p: &Persisted<T>, query: &[(String, String)]) -> HttpResponse {
    let reviewer = query
        .iter()
        .find(|(k, _)| k == "reviewer")
        .map(|(_, v)| v.as_str())
        .unwrap_or("");
    let mut q = p.queue.lock().expect("queue");
    match q.next(reviewer) {
        Ok(item) => {
            if let Err(e) = p.save(&q) {
                return persist_failed(e);
            }
            json_response(
                200,
                &Leased {
                    item: &item,
                    images: item.named(),
                },
            )
        }
        Err(e) => review_error(e),
    }
}

fn verdict<T: Served>(p: &Persisted<T>, id: &str, req: &mut Request) -> HttpResponse {
    let body: VerdictBody = match read_json(req) {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    let mut q = p.queue.lock().expect("queue");
    match q.verdict_named(id, &body.verdict, &body.reviewer) {
        Ok(item) => match p.save(&q) {
            Ok(()) => json_response(200, &item),
            Err(e) => persist_failed(e),
        },
        Err(e) => review_error(e),
    }
}

fn images<T: Served>(p: &Persisted<T>, id: &str) -> HttpResponse {
    let q = p.queue.lock().expect("queue");
    match q.get(id) {
        Some(entry) => json_response(200, &entry.item.named()),
        None => review_error(ReviewError::UnknownPair(id.to_string())),
    }
}

fn image_bytes<T: Served>(state: &State, p: &Persisted<T>, id: &str, which: &str) -> HttpResponse {
    let image = {
        let q = p.queue.lock().expect("queue");
        let Some(entry) = q.get(id) else {
            return review_error(ReviewError::UnknownPair(id.to_string()));
        };
        match entry.item.image_named(which) {
            Some(img) => img.clone(),
            None => return error_response(404, "not_found", format!("no image named {which}")),
        }
    };
    match state.store.get(&image) {
        Ok(bytes) => bytes_response(200, bytes, image.media_type.mime()),
        Err(e) => error_response(404, "missing_blob", e.to_string()),
    }
}

fn blob(state: &State, blob_id: &str) -> HttpResponse {
    let Ok(image) = state.store.resolve(blob_id) else {
        return error_response(404, "missing_blob", format!("no blob {blob_id}"));
    };
    match state.store.get(&image) {
        Ok(bytes) => bytes_response(200, bytes, image.media_type.mime()),
        Err(e) => error_response(404, "missing_blob", e.to_string()),
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

fn static_file(state: &State, path: &str) -> HttpResponse {
    let Some(root) = &state.static_dir else {
        return error_response(404, "not_found", "no static assets configured");
    };
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error_response(404, "not_found", "invalid path");
    }
    let mut full = root.join(rel);
    if path == "/" || full.is_dir() {
        full = full.join("index.html");
    }
    match std::fs::read(&full) {
        Ok(bytes) => bytes_response(200, bytes, mime_for(&full)),
        Err(_) => error_response(404, "not_found", format!("no asset {path}")),
    }
}
