//! Client for an on-demand InSAR processing job service.
//!
//! Each pair of a [`StackPlan`] becomes one job: submit, poll with
//! exponential backoff until terminal, download and checksum the coherence
//! product. Progress is persisted to a per-plan manifest so re-runs skip
//! completed pairs without touching the network. A [`mock`] server with the
//! same wire contract supports offline runs and tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{Mutex, Semaphore};

use crate::catalog::{InsarPair, StackPlan};
use crate::error::{Error, Result};

pub mod mock;

pub const ENV_API_URL: &str = "LTCCD_API_URL";
pub const ENV_API_TOKEN: &str = "LTCCD_API_TOKEN";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub api_url: String,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub looks: String,
    pub max_concurrent: usize,
    /// Resubmissions allowed after a job ends in `failed`.
    pub max_retries: u32,
    /// Retries allowed for quota (HTTP 429) rejections per request.
    pub max_quota_retries: u32,
    #[serde(with = "millis")]
    pub backoff_initial: Duration,
    pub backoff_factor: u32,
    #[serde(with = "millis")]
    pub backoff_max: Duration,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            api_url: String::new(),
            token: None,
            looks: "10x2".into(),
            max_concurrent: 4,
            max_retries: 2,
            max_quota_retries: 8,
            backoff_initial: Duration::from_secs(5),
            backoff_factor: 2,
            backoff_max: Duration::from_secs(120),
        }
    }
}

pub const ACCEPTED_LOOKS: &[&str] = &["10x2", "20x4", "5x1"];

impl IngestConfig {
    /// Defaults with the endpoint and token taken from the environment.
    pub fn from_env() -> Self {
        Self {
            api_url: std::env::var(ENV_API_URL).unwrap_or_default(),
            token: std::env::var(ENV_API_TOKEN).ok().filter(|t| !t.is_empty()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.api_url.is_empty() {
            return Err(Error::Config(format!("no processing endpoint; set {ENV_API_URL}")));
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be at least 1".into()));
        }
        if !ACCEPTED_LOOKS.contains(&self.looks.as_str()) {
            return Err(Error::Config(format!("looks {:?} not in {ACCEPTED_LOOKS:?}", self.looks)));
        }
        if self.backoff_factor == 0 {
            return Err(Error::Config("backoff factor must be at least 1".into()));
        }
        Ok(())
    }

    fn delay(&self, step: u32) -> Duration {
        let factor = (self.backoff_factor as f64).powi(step.min(32) as i32);
        self.backoff_initial.mul_f64(factor).min(self.backoff_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRequest {
    pub job_type: String,
    pub reference: String,
    pub secondary: String,
    pub looks: String,
}

impl JobRequest {
    pub fn coherence(pair: &InsarPair, looks: &str) -> Self {
        Self {
            job_type: "INSAR".into(),
            reference: pair.reference.clone(),
            secondary: pair.secondary.clone(),
            looks: looks.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_url: Option<String>,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_sha256: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SubmitResponse {
    job_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub reference: String,
    pub secondary: String,
    pub state: EntryState,
    pub job_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Plan-scoped record of every pair's outcome, keyed by pair key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))? + "\n";
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Outcome of processing a plan.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessReport {
    pub products: BTreeMap<String, PathBuf>,
    pub failures: BTreeMap<String, String>,
    /// Job submissions made during this call.
    pub submissions: usize,
}

impl ProcessReport {
    /// Product paths in plan order.
    pub fn ordered_products(&self, plan: &StackPlan) -> Vec<PathBuf> {
        plan.pairs.iter().filter_map(|p| self.products.get(&p.key()).cloned()).collect()
    }
}

/// Thin HTTP wrapper over the job service.
#[derive(Debug, Clone)]
pub struct JobClient {
    http: reqwest::Client,
    cfg: IngestConfig,
}

enum Attempt<T> {
    Done(T),
    Quota,
}

impl JobClient {
    pub fn new(cfg: IngestConfig) -> Result<Self> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Service(e.to_string()))?;
        Ok(Self { http, cfg })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.api_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    fn authed(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.cfg.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn check(&self, resp: reqwest::Response) -> Result<Attempt<reqwest::Response>> {
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(Error::Credential(format!("service answered {status}")));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Ok(Attempt::Quota);
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(Error::Service(format!("{status}: {body}")));
        }
        Ok(Attempt::Done(resp))
    }

    /// Sends a request, waiting out quota rejections with backoff.
    async fn send(&self, build: impl Fn() -> reqwest::RequestBuilder) -> Result<reqwest::Response> {
        for step in 0..=self.cfg.max_quota_retries {
            let resp = self
                .authed(build())
                .send()
                .await
                .map_err(|e| Error::Service(e.to_string()))?;
            match self.check(resp).await? {
                Attempt::Done(r) => return Ok(r),
                Attempt::Quota => {
                    let wait = self.cfg.delay(step);
                    tracing::warn!(?wait, "processing quota exceeded; backing off");
                    tokio::time::sleep(wait).await;
                }
            }
        }
        Err(Error::Service("quota retries exhausted".into()))
    }

    pub async fn submit(&self, pair: &InsarPair) -> Result<String> {
        let body = JobRequest::coherence(pair, &self.cfg.looks);
        let url = self.url("jobs");
        let resp = self.send(|| self.http.post(&url).json(&body)).await?;
        let r: SubmitResponse = resp.json().await.map_err(|e| Error::Service(format!("submit response: {e}")))?;
        Ok(r.job_id)
    }

    pub async fn status(&self, job_id: &str) -> Result<JobStatus> {
        let url = self.url(&format!("jobs/{job_id}"));
        let resp = self.send(|| self.http.get(&url)).await?;
        let status: JobStatus = resp.json().await.map_err(|e| Error::Service(format!("status response: {e}")))?;
        if status.state == JobState::Succeeded && status.product_url.is_none() {
            return Err(Error::Service(format!("job {job_id} succeeded without a product url")));
        }
        Ok(status)
    }

    /// Polls with exponential backoff until the job is terminal.
    pub async fn wait(&self, job_id: &str) -> Result<JobStatus> {
        let mut step = 0;
        loop {
            let status = self.status(job_id).await?;
            if status.state.is_terminal() {
                return Ok(status);
            }
            tokio::time::sleep(self.cfg.delay(step)).await;
            step += 1;
        }
    }

    pub async fn download(&self, url: &str) -> Result<Vec<u8>> {
        let resp = self.send(|| self.http.get(url)).await?;
        Ok(resp
            .bytes()
            .await
            .map_err(|e| Error::Service(format!("download: {e}")))?
            .to_vec())
    }
}

enum PairOutcome {
    Product { path: PathBuf, sha256: String, jobs: Vec<String> },
    Failed { reason: String, jobs: Vec<String> },
}

async fn fetch_verified(client: &JobClient, pair: &InsarPair, status: &JobStatus) -> Result<Vec<u8>> {
    let url = status.product_url.as_deref().expect("checked on status");
    let bytes = client.download(url).await?;
    let Some(expected) = &status.product_sha256 else {
        return Ok(bytes);
    };
    if &sha256_hex(&bytes) == expected {
        return Ok(bytes);
    }
    tracing::warn!(pair = %pair.key(), "checksum mismatch; downloading again");
    let bytes = client.download(url).await?;
    let actual = sha256_hex(&bytes);
    if &actual != expected {
        return Err(Error::Integrity {
            pair: pair.key(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(bytes)
}

async fn process_pair(client: &JobClient, pair: &InsarPair, out_dir: &Path) -> Result<PairOutcome> {
    let mut jobs = Vec::new();
    let mut last_reason = String::new();
    for attempt in 0..=client.cfg.max_retries {
        let job = client.submit(pair).await?;
        jobs.push(job.clone());
        let status = client.wait(&job).await?;
        if status.state == JobState::Failed {
            last_reason = format!("job {job} failed (attempt {})", attempt + 1);
            tracing::warn!(pair = %pair.key(), %job, attempt, "job failed");
            continue;
        }
        let bytes = match fetch_verified(client, pair, &status).await {
            Ok(b) => b,
            Err(e @ Error::Integrity { .. }) => {
                return Ok(PairOutcome::Failed {
                    reason: e.to_string(),
                    jobs,
                })
            }
            Err(e) => return Err(e),
        };
        let path = out_dir.join(format!("{}.tif", pair.key()));
        let tmp = out_dir.join(format!("{}.tif.part", pair.key()));
        tokio::fs::write(&tmp, &bytes).await.map_err(|e| Error::io(&tmp, e))?;
        tokio::fs::rename(&tmp, &path).await.map_err(|e| Error::io(&path, e))?;
        return Ok(PairOutcome::Product {
            path,
            sha256: sha256_hex(&bytes),
            jobs,
        });
    }
    Ok(PairOutcome::Failed { reason: last_reason, jobs })
}

/// Turns every pair of `plan` into a local coherence product under `out_dir`.
///
/// Pairs already recorded as succeeded in the manifest, with an intact file,
/// are not resubmitted. Pairs that fail after retries are reported rather
/// than aborting the run; the stack-size floor is enforced downstream.
pub async fn process_pairs(plan: &StackPlan, cfg: &IngestConfig, out_dir: &Path) -> Result<ProcessReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::load(out_dir)?.unwrap_or_default();
    manifest.plan = plan.stem();

    let mut report = ProcessReport::default();
    let mut todo = Vec::new();
    for pair in &plan.pairs {
        let key = pair.key();
        let done = manifest.entries.get(&key).and_then(|e| {
            let path = out_dir.join(e.product.as_ref()?);
            (e.state == EntryState::Succeeded && file_sha256(&path).as_ref() == e.sha256.as_ref()).then_some(path)
        });
        match done {
            Some(path) => {
                report.products.insert(key, path);
            }
            None => todo.push(pair.clone()),
        }
    }
    if todo.is_empty() {
        return Ok(report);
    }

    let client = Arc::new(JobClient::new(cfg.clone())?);
    let permits = Arc::new(Semaphore::new(cfg.max_concurrent));
    let manifest = Arc::new(Mutex::new(manifest));
    let mut tasks = tokio::task::JoinSet::new();
    for pair in todo {
        let (client, permits, manifest) = (client.clone(), permits.clone(), manifest.clone());
        let out_dir = out_dir.to_path_buf();
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore never closed");
            let outcome = process_pair(&client, &pair, &out_dir).await;
            if let Ok(o) = &outcome {
                // Single writer: the manifest is rewritten under the lock.
                let mut m = manifest.lock().await;
                let entry = match o {
                    PairOutcome::Product { path, sha256, jobs } => ManifestEntry {
                        reference: pair.reference.clone(),
                        secondary: pair.secondary.clone(),
                        state: EntryState::Succeeded,
                        job_ids: jobs.clone(),
                        product: path.file_name().map(|n| n.to_string_lossy().into_owned()),
                        sha256: Some(sha256.clone()),
                        error: None,
                    },
                    PairOutcome::Failed { reason, jobs } => ManifestEntry {
                        reference: pair.reference.clone(),
                        secondary: pair.secondary.clone(),
                        state: EntryState::Failed,
                        job_ids: jobs.clone(),
                        product: None,
                        sha256: None,
                        error: Some(reason.clone()),
                    },
                };
                m.entries.insert(pair.key(), entry);
                m.save(&out_dir)?;
            }
            outcome.map(|o| (pair, o))
        });
    }

    let mut first_error = None;
    while let Some(joined) = tasks.join_next().await {
        match joined.map_err(|e| Error::Service(format!("worker panicked: {e}")))? {
            Ok((pair, PairOutcome::Product { path, jobs, .. })) => {
                report.submissions += jobs.len();
                report.products.insert(pair.key(), path);
            }
            Ok((pair, PairOutcome::Failed { reason, jobs })) => {
                report.submissions += jobs.len();
                report.failures.insert(pair.key(), reason);
            }
            Err(e) => {
                // Credential errors poison every remaining job.
                if matches!(e, Error::Credential(_)) {
                    tasks.abort_all();
                }
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    if report.products.is_empty() {
        return Err(Error::EmptyStack(plan.pairs.len()));
    }
    tracing::info!(
        plan = %plan.stem(),
        products = report.products.len(),
        failures = report.failures.len(),
        "plan processed"
    );
    Ok(report)
}
