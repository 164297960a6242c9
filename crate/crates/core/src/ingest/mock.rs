//! In-process job service speaking the same wire contract as the real one,
//! with scripted failures and concurrency instrumentation.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::task::JoinHandle;

use super::{sha256_hex, JobRequest, JobState, JobStatus};
use crate::error::{Error, Result};

/// Produces product bytes for (reference, secondary).
pub type ProductFn = Arc<dyn Fn(&str, &str) -> Vec<u8> + Send + Sync>;

#[derive(Clone)]
pub struct MockConfig {
    /// Required bearer token; `None` accepts any caller.
    pub token: Option<String>,
    /// Pair keys whose jobs always fail.
    pub permanent_failures: BTreeSet<String>,
    /// Pair keys whose first n jobs fail.
    pub transient_failures: BTreeMap<String, u32>,
    /// Pair keys whose first download is corrupted.
    pub corrupt_first_download: BTreeSet<String>,
    /// Pair keys whose every download is corrupted.
    pub always_corrupt: BTreeSet<String>,
    /// Status polls answered `running` before a job turns terminal.
    pub polls_until_done: u32,
    /// Number of initial submissions rejected with HTTP 429.
    pub quota_rejections: u32,
    pub product: ProductFn,
}

impl std::fmt::Debug for MockConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockConfig")
            .field("permanent_failures", &self.permanent_failures)
            .field("transient_failures", &self.transient_failures)
            .field("polls_until_done", &self.polls_until_done)
            .finish_non_exhaustive()
    }
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            token: None,
            permanent_failures: BTreeSet::new(),
            transient_failures: BTreeMap::new(),
            corrupt_first_download: BTreeSet::new(),
            always_corrupt: BTreeSet::new(),
            polls_until_done: 2,
            quota_rejections: 0,
            product: Arc::new(|r, s| format!("{r}__{s}").into_bytes()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockStats {
    pub submissions: usize,
    pub in_flight: usize,
    pub max_in_flight: usize,
    pub downloads: usize,
    pub quota_rejections: usize,
}

struct Job {
    pair: String,
    reference: String,
    secondary: String,
    polls: u32,
    outcome: Option<JobState>,
    attempt: u32,
}

struct Inner {
    cfg: MockConfig,
    base_url: String,
    jobs: Vec<Job>,
    attempts: BTreeMap<String, u32>,
    corrupted: BTreeSet<String>,
    stats: MockStats,
}

type Shared = Arc<Mutex<Inner>>;

fn authorized(inner: &Inner, headers: &HeaderMap) -> bool {
    match &inner.cfg.token {
        None => true,
        Some(t) => headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {t}")),
    }
}

async fn submit(State(state): State<Shared>, headers: HeaderMap, Json(req): Json<JobRequest>) -> Response {
    let mut inner = state.lock().expect("mock state lock");
    if !authorized(&inner, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    if (inner.stats.quota_rejections as u32) < inner.cfg.quota_rejections {
        inner.stats.quota_rejections += 1;
        return StatusCode::TOO_MANY_REQUESTS.into_response();
    }
    if req.job_type != "INSAR" {
        return (StatusCode::BAD_REQUEST, "unsupported job type").into_response();
    }
    let pair = format!("{}__{}", req.reference, req.secondary);
    let attempt = {
        let a = inner.attempts.entry(pair.clone()).or_insert(0);
        *a += 1;
        *a
    };
    let id = format!("job-{:05}", inner.jobs.len() + 1);
    inner.jobs.push(Job {
        pair,
        reference: req.reference,
        secondary: req.secondary,
        polls: 0,
        outcome: None,
        attempt,
    });
    inner.stats.submissions += 1;
    inner.stats.in_flight += 1;
    inner.stats.max_in_flight = inner.stats.max_in_flight.max(inner.stats.in_flight);
    Json(serde_json::json!({ "job_id": id })).into_response()
}

fn job_index(id: &str) -> Option<usize> {
    id.strip_prefix("job-")?.parse::<usize>().ok()?.checked_sub(1)
}

async fn status(State(state): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    let mut guard = state.lock().expect("mock state lock");
    let inner = &mut *guard;
    if !authorized(inner, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let Some(job) = job_index(&id).and_then(|i| inner.jobs.get_mut(i)) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    if job.outcome.is_none() {
        job.polls += 1;
        if job.polls > inner.cfg.polls_until_done {
            let fails_transiently = inner.cfg.transient_failures.get(&job.pair).is_some_and(|&n| job.attempt <= n);
            let failed = inner.cfg.permanent_failures.contains(&job.pair) || fails_transiently;
            job.outcome = Some(if failed { JobState::Failed } else { JobState::Succeeded });
            inner.stats.in_flight -= 1;
        }
    }
    let state = job.outcome.unwrap_or(if job.polls <= 1 { JobState::Pending } else { JobState::Running });
    let succeeded = state == JobState::Succeeded;
    let sha = succeeded.then(|| sha256_hex(&(inner.cfg.product)(&job.reference, &job.secondary)));
    Json(JobStatus {
        job_id: id.clone(),
        state,
        product_url: succeeded.then(|| format!("{}/products/{id}", inner.base_url)),
        attempts: job.attempt,
        product_sha256: sha,
    })
    .into_response()
}

async fn product(State(state): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    let mut guard = state.lock().expect("mock state lock");
    let inner = &mut *guard;
    if !authorized(inner, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let Some(job) = job_index(&id).and_then(|i| inner.jobs.get(i)) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    if job.outcome != Some(JobState::Succeeded) {
        return StatusCode::CONFLICT.into_response();
    }
    inner.stats.downloads += 1;
    let mut bytes = (inner.cfg.product)(&job.reference, &job.secondary);
    let corrupt = inner.cfg.always_corrupt.contains(&job.pair)
        || (inner.cfg.corrupt_first_download.contains(&job.pair) && inner.corrupted.insert(job.pair.clone()));
    if corrupt {
        match bytes.last_mut() {
            Some(b) => *b ^= 0xff,
            None => bytes.push(0),
        }
    }
    Bytes::from(bytes).into_response()
}

/// Running mock service; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Shared,
    handle: JoinHandle<()>,
}

impl MockServer {
    /// Binds an ephemeral localhost port on the current tokio runtime.
    pub async fn start(cfg: MockConfig) -> Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|e| Error::Service(format!("mock bind: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Service(e.to_string()))?;
        let state: Shared = Arc::new(Mutex::new(Inner {
            cfg,
            base_url: format!("http://{addr}"),
            jobs: Vec::new(),
            attempts: BTreeMap::new(),
            corrupted: BTreeSet::new(),
            stats: MockStats::default(),
        }));
        let app = Router::new()
            .route("/jobs", post(submit))
            .route("/jobs/{id}", get(status))
            .route("/products/{id}", get(product))
            .with_state(state.clone());
        let handle = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "mock server stopped");
            }
        });
        Ok(Self { addr, state, handle })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.state.lock().expect("mock state lock").stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}
