//! Polite, bounded image downloading.
//!
//! [`fetch_all`] owns admission control: a global concurrency limit, a
//! per-host concurrency limit and a minimum gap between request starts on
//! the same host. A [`Fetcher`] only performs single GETs.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::sync::{OnceCell, Semaphore};
use url::Url;
use waon_core::PairCandidate;

use crate::robots::Robots;

/// Download limits and politeness settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FetchPolicy {
    /// Requests in flight across all hosts.
    pub max_concurrency: usize,
    /// Requests in flight per host.
    pub per_host_concurrency: usize,
    /// Minimum gap between request starts on one host. Starts are spaced
    /// 10% wider than this so that scheduling and transport jitter does not
    /// bring the gap seen by the server below it.
    pub per_host_min_interval_ms: u64,
    /// Whole-request deadline.
    pub timeout_ms: u64,
    /// Bodies longer than this are abandoned as `too_large`.
    pub max_bytes: u64,
    /// Extra attempts after a `connect_error`.
    pub retries: u32,
    /// Sent as `User-Agent`; its first token is matched against robots.txt.
    pub user_agent: String,
    /// Consult `/robots.txt` before fetching from a host.
    pub respect_robots: bool,
    /// Redirect hops followed before giving up.
    pub max_redirects: usize,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            max_concurrency: 256,
            per_host_concurrency: 2,
            per_host_min_interval_ms: 500,
            timeout_ms: 10_000,
            max_bytes: 20 * 1024 * 1024,
            retries: 1,
            user_agent: concat!("waon/", env!("CARGO_PKG_VERSION")).to_string(),
            respect_robots: true,
            max_redirects: 5,
        }
    }
}

impl FetchPolicy {
    /// Field-level problems, empty when valid.
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.max_concurrency == 0 {
            errs.push(("fetch.max_concurrency", "must be at least 1".to_string()));
        }
        if self.per_host_concurrency == 0 {
            errs.push(("fetch.per_host_concurrency", "must be at least 1".to_string()));
        }
        if self.timeout_ms == 0 {
            errs.push(("fetch.timeout_ms", "must be at least 1".to_string()));
        }
        if self.max_bytes == 0 {
            errs.push(("fetch.max_bytes", "must be at least 1".to_string()));
        }
        if self.user_agent.trim().is_empty() {
            errs.push(("fetch.user_agent", "must not be empty".to_string()));
        }
        errs
    }
}

/// How a download ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchOutcome {
    /// Image bytes received.
    Ok,
    /// Non-2xx status or a redirect loop.
    HttpError,
    /// Deadline exceeded.
    Timeout,
    /// Body longer than `max_bytes`.
    TooLarge,
    /// Content type is not `image/*`.
    NotImage,
    /// Could not connect (DNS, refused, TLS, missing file).
    ConnectError,
    /// Disallowed by the host's robots.txt.
    RobotsDenied,
}

impl FetchOutcome {
    /// All outcomes.
    pub const ALL: [FetchOutcome; 7] = [
        FetchOutcome::Ok,
        FetchOutcome::HttpError,
        FetchOutcome::Timeout,
        FetchOutcome::TooLarge,
        FetchOutcome::NotImage,
        FetchOutcome::ConnectError,
        FetchOutcome::RobotsDenied,
    ];

    /// Wire name.
    pub fn as_str(self) -> &'static str {
        match self {
            FetchOutcome::Ok => "ok",
            FetchOutcome::HttpError => "http_error",
            FetchOutcome::Timeout => "timeout",
            FetchOutcome::TooLarge => "too_large",
            FetchOutcome::NotImage => "not_image",
            FetchOutcome::ConnectError => "connect_error",
            FetchOutcome::RobotsDenied => "robots_denied",
        }
    }
}

/// Result of a single GET.
#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    /// Classification.
    pub outcome: FetchOutcome,
    /// Final HTTP status, if a response arrived.
    pub status_code: Option<u16>,
    /// Body, present only for `Ok`.
    pub bytes: Option<Vec<u8>>,
    /// Response content type.
    pub content_type: Option<String>,
    /// URL after redirects.
    pub final_url: Option<String>,
}

impl Fetched {
    /// A bodiless result.
    pub fn failed(outcome: FetchOutcome, status_code: Option<u16>) -> Self {
        Self { outcome, status_code, bytes: None, content_type: None, final_url: None }
    }
}

/// What a GET is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    /// An image: non-`image/*` responses are `not_image`.
    Image,
    /// Anything with a 2xx status (robots.txt).
    Any,
}

/// Performs one GET. Implementations must stop reading once `max_bytes` is
/// exceeded.
pub trait Fetcher: Send + Sync {
    /// Fetches `url`.
    fn get(&self, url: &Url, want: Want, max_bytes: u64) -> impl Future<Output = Fetched> + Send;

    /// Whether host politeness intervals apply. Local fetchers opt out.
    fn rate_limited(&self) -> bool {
        true
    }
}

/// One candidate's download result.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    /// Position of the candidate in the input.
    pub seq: usize,
    /// The candidate.
    pub candidate: PairCandidate,
    /// Classification.
    pub outcome: FetchOutcome,
    /// Final HTTP status.
    pub status_code: Option<u16>,
    /// Image bytes for `Ok`.
    pub bytes: Option<Vec<u8>>,
    /// Response content type.
    pub content_type: Option<String>,
    /// URL after redirects.
    pub final_url: Option<String>,
    /// Wall time including admission waits.
    pub elapsed_ms: u64,
}

fn host_key(url: &Url) -> String {
    match url.port_or_known_default() {
        Some(p) => format!("{}:{p}", url.host_str().unwrap_or("")),
        None => url.host_str().unwrap_or("").to_string(),
    }
}

/// Gap the gate leaves between request starts on one host.
pub fn start_spacing(min_interval_ms: u64) -> Duration {
    Duration::from_millis(min_interval_ms) * 11 / 10
}

struct Host {
    slots: Semaphore,
    last_start: tokio::sync::Mutex<Option<Instant>>,
    robots: OnceCell<Option<Robots>>,
}

struct Gate {
    global: Semaphore,
    hosts: Mutex<HashMap<String, Arc<Host>>>,
    per_host: usize,
    interval: Duration,
}

impl Gate {
    fn host(&self, key: &str) -> Arc<Host> {
        let mut hosts = self.hosts.lock().expect("host table poisoned");
        hosts
            .entry(key.to_string())
            .or_insert_with(|| {
                Arc::new(Host {
                    slots: Semaphore::new(self.per_host),
                    last_start: tokio::sync::Mutex::new(None),
                    robots: OnceCell::new(),
                })
            })
            .clone()
    }

    /// Runs `get` once per-host and global slots are held and the host's
    /// spacing has elapsed since its previous request start.
    async fn admit<F: Future<Output = Fetched>>(&self, host: &Host, rate_limited: bool, get: F) -> Fetched {
        let _slot = host.slots.acquire().await.expect("semaphore closed");
        let _global = self.global.acquire().await.expect("semaphore closed");
        if rate_limited {
            let mut last = host.last_start.lock().await;
            if let Some(prev) = *last {
                tokio::time::sleep_until((prev + self.interval).into()).await;
            }
            *last = Some(Instant::now());
        }
        get.await
    }
}

async fn robots_allows<F: Fetcher>(fetcher: &F, gate: &Gate, host: &Host, url: &Url, policy: &FetchPolicy) -> bool {
    let robot = host
        .robots
        .get_or_init(|| async {
            let mut robots_url = url.clone();
            robots_url.set_path("/robots.txt");
            robots_url.set_query(None);
            let got = gate.admit(host, fetcher.rate_limited(), fetcher.get(&robots_url, Want::Any, 512 * 1024)).await;
            let body = got.bytes.filter(|_| got.outcome == FetchOutcome::Ok)?;
            Some(Robots::parse(&policy.user_agent, &String::from_utf8_lossy(&body)))
        })
        .await;
    robot.as_ref().is_none_or(|r| {
        let path = match url.query() {
            Some(q) => format!("{}?{q}", url.path()),
            None => url.path().to_string(),
        };
        r.allowed(&path)
    })
}

async fn fetch_one<F: Fetcher>(fetcher: &F, gate: &Gate, policy: &FetchPolicy, seq: usize, candidate: PairCandidate) -> FetchResult {
    let started = Instant::now();
    let got = match Url::parse(&candidate.image_url) {
        Err(_) => Fetched::failed(FetchOutcome::ConnectError, None),
        Ok(url) => {
            let host = gate.host(&host_key(&url));
            if policy.respect_robots && !robots_allows(fetcher, gate, &host, &url, policy).await {
                Fetched::failed(FetchOutcome::RobotsDenied, None)
            } else {
                let mut attempt = 0;
                loop {
                    let got = gate.admit(&host, fetcher.rate_limited(), fetcher.get(&url, Want::Image, policy.max_bytes)).await;
                    if got.outcome != FetchOutcome::ConnectError || attempt >= policy.retries {
                        break got;
                    }
                    attempt += 1;
                }
            }
        }
    };
    FetchResult {
        seq,
        candidate,
        outcome: got.outcome,
        status_code: got.status_code,
        bytes: got.bytes,
        content_type: got.content_type,
        final_url: got.final_url,
        elapsed_ms: started.elapsed().as_millis() as u64,
    }
}

/// Reorders `(seq, candidate)` so consecutive items rotate across hosts,
/// keeping per-host order. Keeps one busy host from occupying every global
/// slot while other hosts idle.
fn interleave_by_host(candidates: Vec<PairCandidate>) -> Vec<(usize, PairCandidate)> {
    let mut queues: Vec<Vec<(usize, PairCandidate)>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (seq, c) in candidates.into_iter().enumerate() {
        let key = Url::parse(&c.image_url).map(|u| host_key(&u)).unwrap_or_default();
        let q = *index.entry(key).or_insert_with(|| {
            queues.push(Vec::new());
            queues.len() - 1
        });
        queues[q].push((seq, c));
    }
    let total = queues.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = queues.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for it in &mut iters {
            out.extend(it.next());
        }
    }
    out
}

/// Downloads every candidate under `policy`. Returns exactly one result per
/// candidate, sorted by `seq`.
pub async fn fetch_all<F: Fetcher>(fetcher: &F, candidates: Vec<PairCandidate>, policy: &FetchPolicy) -> Vec<FetchResult> {
    let gate = Gate {
        global: Semaphore::new(policy.max_concurrency.max(1)),
        hosts: Mutex::new(HashMap::new()),
        per_host: policy.per_host_concurrency.max(1),
        interval: start_spacing(policy.per_host_min_interval_ms),
    };
    let gate = &gate;
    let mut results: Vec<FetchResult> = futures::stream::iter(interleave_by_host(candidates))
        .map(|(seq, c)| fetch_one(fetcher, gate, policy, seq, c))
        .buffer_unordered(policy.max_concurrency.max(1))
        .collect()
        .await;
    results.sort_by_key(|r| r.seq);
    results
}

/// Outcome counts of a result set.
pub fn outcome_histogram(results: &[FetchResult]) -> BTreeMap<FetchOutcome, u64> {
    let mut h = BTreeMap::new();
    for r in results {
        *h.entry(r.outcome).or_insert(0) += 1;
    }
    h
}

fn classify_head(status: u16, content_type: Option<&str>, want: Want) -> Option<FetchOutcome> {
    if !(200..300).contains(&status) {
        return Some(FetchOutcome::HttpError);
    }
    let is_image = content_type.is_some_and(|ct| ct.trim_start().to_ascii_lowercase().starts_with("image/"));
    (want == Want::Image && !is_image).then_some(FetchOutcome::NotImage)
}

/// Network fetcher on reqwest.
#[derive(Debug, Clone)]
pub struct HttpFetcher {
    client: reqwest::Client,
}

impl HttpFetcher {
    /// Client configured from `policy`; proxies come from the environment.
    pub fn new(policy: &FetchPolicy) -> reqwest::Result<Self> {
        let client = reqwest::Client::builder()
            .user_agent(&policy.user_agent)
            .timeout(Duration::from_millis(policy.timeout_ms))
            .redirect(reqwest::redirect::Policy::limited(policy.max_redirects))
            .build()?;
        Ok(Self { client })
    }

    fn map_error(e: &reqwest::Error) -> FetchOutcome {
        if e.is_timeout() {
            FetchOutcome::Timeout
        } else if e.is_redirect() || e.is_status() {
            FetchOutcome::HttpError
        } else if e.is_body() || e.is_decode() {
            // Connection dropped mid-body.
            FetchOutcome::HttpError
        } else {
            FetchOutcome::ConnectError
        }
    }
}

impl Fetcher for HttpFetcher {
    async fn get(&self, url: &Url, want: Want, max_bytes: u64) -> Fetched {
        let resp = match self.client.get(url.clone()).send().await {
            Ok(r) => r,
            Err(e) => return Fetched::failed(Self::map_error(&e), e.status().map(|s| s.as_u16())),
        };
        let status = resp.status().as_u16();
        let content_type = resp.headers().get(reqwest::header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).map(str::to_string);
        let final_url = Some(resp.url().to_string());
        let fail = |outcome| Fetched { outcome, status_code: Some(status), bytes: None, content_type: content_type.clone(), final_url: final_url.clone() };
        if let Some(outcome) = classify_head(status, content_type.as_deref(), want) {
            return fail(outcome);
        }
        if resp.content_length().is_some_and(|n| n > max_bytes) {
            return fail(FetchOutcome::TooLarge);
        }
        let mut body = Vec::new();
        let mut stream = resp.bytes_stream();
        while let Some(chunk) = stream.next().await {
            match chunk {
                Ok(chunk) => {
                    if body.len() as u64 + chunk.len() as u64 > max_bytes {
                        return fail(FetchOutcome::TooLarge);
                    }
                    body.extend_from_slice(&chunk);
                }
                Err(e) => return fail(Self::map_error(&e)),
            }
        }
        if body.is_empty() && want == Want::Image {
            return fail(FetchOutcome::HttpError);
        }
        Fetched { outcome: FetchOutcome::Ok, status_code: Some(status), bytes: Some(body), content_type, final_url }
    }
}

/// Offline fetcher serving `<root>/<host>/<path>` from disk.
///
/// The content type is guessed from the file extension. A missing file is
/// a 404; a missing host directory is a `connect_error`.
#[derive(Debug, Clone)]
pub struct FileFetcher {
    root: PathBuf,
}

impl FileFetcher {
    /// Serves files below `root`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Local path a URL maps to.
    pub fn path_for(&self, url: &Url) -> Option<PathBuf> {
        let host = url.host_str()?;
        let mut p = self.root.join(host);
        for seg in url.path_segments()? {
            let seg = percent_decode(seg);
            if seg.is_empty() || seg == "." || seg == ".." || seg.contains(['/', '\\']) {
                return None;
            }
            p.push(seg);
        }
        Some(p)
    }
}

fn percent_decode(s: &str) -> String {
    percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned()
}

/// Content type by file extension.
pub fn guess_content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("svg") => "image/svg+xml",
        Some("html" | "htm") => "text/html",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

impl Fetcher for FileFetcher {
    async fn get(&self, url: &Url, want: Want, max_bytes: u64) -> Fetched {
        let Some(path) = self.path_for(url) else {
            return Fetched::failed(FetchOutcome::HttpError, Some(400));
        };
        if !self.root.join(url.host_str().unwrap_or("")).is_dir() {
            return Fetched::failed(FetchOutcome::ConnectError, None);
        }
        let content_type = guess_content_type(&path).to_string();
        let meta = match tokio::fs::metadata(&path).await {
            Ok(m) if m.is_file() => m,
            _ => return Fetched::failed(FetchOutcome::HttpError, Some(404)),
        };
        let fail = |outcome| Fetched {
            outcome,
            status_code: Some(200),
            bytes: None,
            content_type: Some(content_type.clone()),
            final_url: Some(url.to_string()),
        };
        if let Some(outcome) = classify_head(200, Some(&content_type), want) {
            return fail(outcome);
        }
        if meta.len() > max_bytes {
            return fail(FetchOutcome::TooLarge);
        }
        match tokio::fs::read(&path).await {
            Ok(bytes) if !bytes.is_empty() || want == Want::Any => Fetched {
                outcome: FetchOutcome::Ok,
                status_code: Some(200),
                bytes: Some(bytes),
                content_type: Some(content_type),
                final_url: Some(url.to_string()),
            },
            _ => fail(FetchOutcome::HttpError),
        }
    }

    fn rate_limited(&self) -> bool {
        false
    }
}
