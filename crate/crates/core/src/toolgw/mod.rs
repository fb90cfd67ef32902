//! Multimodal search gateway.
//!
//! [`Gateway`] answers queries from a similarity-keyed cache when possible and
//! otherwise calls its [`SearchBackend`], keeps the top `k_results`, runs the
//! [`Summarizer`] over text results and stores them. Concurrent misses for the
//! same normalised query share one backend call. [`http`] exposes a gateway as
//! `POST /text_search` and `POST /image_search`, and [`http::RemoteTools`] is
//! the matching client.

pub mod backend;
pub mod cache;
pub mod http;
pub mod similarity;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use backend::{
    BackendError, ExternalEngine, IdentitySummarizer, IndexDoc, LocalIndex, PolicySummarizer, SearchBackend,
    Summarizer, SummarizerError,
};
pub use cache::{CacheEntry, CacheHit, SearchCache, DEFAULT_CACHE_THRESHOLD};
pub use similarity::{normalize_query, similarity};

use crate::protocol::{Modality, Observation, SearchQuery, SearchQuerySet};

/// Results returned per query when not configured otherwise.
pub const DEFAULT_K_RESULTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub summary: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// Set when the summarizer failed and `summary` is the raw snippet.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl SearchResult {
    pub fn text(title: impl Into<String>, summary: impl Into<String>, url: impl Into<String>) -> Self {
        SearchResult {
            title: title.into(),
            summary: summary.into(),
            url: url.into(),
            image_ref: None,
            degraded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("query is empty")]
    EmptyQuery,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot bind {addr}: {detail}")]
    Bind { addr: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("tool unavailable: {0}")]
    Unavailable(String),
    #[error("tool rejected request: {0}")]
    Rejected(String),
}

/// What a rollout calls to execute a search action.
pub trait Tools: Send + Sync {
    fn execute(&self, set: &SearchQuerySet) -> Result<Observation, ToolError>;
}

/// Results for one query of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResults {
    pub entity: String,
    pub q: String,
    pub results: Vec<SearchResult>,
    #[serde(default)]
    pub cache_hit: bool,
}

fn clean(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders all results of one batched search as a single observation.
pub fn render_observation(modality: Modality, batch: &[QueryResults]) -> Observation {
    let mut body = String::new();
    for (i, qr) in batch.iter().enumerate() {
        if i > 0 {
            body.push_str("\n\n");
        }
        let _ = write!(body, "Query \"{}\" (entity: {})", clean(&qr.q), clean(&qr.entity));
        if qr.results.is_empty() {
            body.push_str("\nNo results.");
        }
        for (j, r) in qr.results.iter().enumerate() {
            let _ = write!(body, "\n[{}] ", j + 1);
            if let Some(img) = &r.image_ref {
                let _ = write!(body, "image: {} | ", clean(img));
            }
            let _ = write!(body, "{}: {} | source: {}", clean(&r.title), clean(&r.summary), clean(&r.url));
        }
    }
    let images = batch
        .iter()
        .flat_map(|qr| qr.results.iter().filter_map(|r| r.image_ref.clone()))
        .collect();
    Observation::new(body, modality).with_images(images)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub results: Vec<SearchResult>,
    pub cache_hit: bool,
}

type Flight = Arc<OnceLock<Result<SearchOutcome, GatewayError>>>;

pub struct Gateway {
    backend: Arc<dyn SearchBackend>,
    summarizer: Arc<dyn Summarizer>,
    cache: SearchCache,
    k_results: usize,
    flights: Mutex<HashMap<(Modality, String), Flight>>,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn SearchBackend>, cache: SearchCache, k_results: usize) -> Self {
        Gateway {
            backend,
            summarizer: Arc::new(IdentitySummarizer),
            cache,
            k_results: k_results.max(1),
            flights: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
        }
    }

    /// In-memory gateway over a local index with default K and threshold.
    pub fn local(index: LocalIndex) -> Self {
        Self::new(
            Arc::new(index),
            SearchCache::in_memory(DEFAULT_CACHE_THRESHOLD),
            DEFAULT_K_RESULTS,
        )
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn Summarizer>) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn k_results(&self) -> usize {
        self.k_results
    }

    pub fn cache(&self) -> &SearchCache {
        &self.cache
    }

    /// Number of times the backend has been called.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn search(&self, query: &str, modality: Modality) -> Result<SearchOutcome, GatewayError> {
        if query.trim().is_empty() {
            return Err(GatewayError::EmptyQuery);
        }
        if let Some(hit) = self.cache.lookup(query, modality) {
            return Ok(SearchOutcome {
                results: hit.results,
                cache_hit: true,
            });
        }
        let key = (modality, normalize_query(query));
        let flight = self
            .flights
            .lock()
            .expect("flight map lock")
            .entry(key.clone())
            .or_default()
            .clone();
        let mut leader = false;
        let out = flight
            .get_or_init(|| {
                leader = true;
                self.fetch(query, modality)
            })
            .clone();
        if leader {
            self.flights.lock().expect("flight map lock").remove(&key);
        }
        out
    }

    fn fetch(&self, query: &str, modality: Modality) -> Result<SearchOutcome, GatewayError> {
        // A flight for a different but similar query may have filled the cache meanwhile.
        if let Some(hit) = self.cache.lookup(query, modality) {
            return Ok(SearchOutcome {
                results: hit.results,
                cache_hit: true,
            });
        }
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let mut results = self.backend.search(query, modality, self.k_results)?;
        results.truncate(self.k_results);
        let mut degraded = false;
        if modality == Modality::Text {
            for r in &mut results {
                match self.summarizer.summarize(query, r) {
                    Ok(s) if !s.trim().is_empty() => r.summary = s,
                    Ok(_) => {}
                    Err(e) => {
                        tracing::warn!(error = %e, "summarizer failed; returning raw snippets");
                        degraded = true;
                        r.degraded = true;
                    }
                }
                if r.summary.trim().is_empty() {
                    r.summary = r.title.clone();
                }
            }
        }
        if !degraded {
            if let Err(e) = self.cache.insert(query, modality, results.clone()) {
                tracing::warn!(error = %e, "cache write failed");
            }
        }
        Ok(SearchOutcome {
            results,
            cache_hit: false,
        })
    }

    pub fn search_batch(&self, modality: Modality, queries: &[SearchQuery]) -> Result<Vec<QueryResults>, GatewayError> {
        queries
            .iter()
            .map(|q| {
                self.search(&q.q, modality).map(|o| QueryResults {
                    entity: q.entity.clone(),
                    q: q.q.clone(),
                    results: o.results,
                    cache_hit: o.cache_hit,
                })
            })
            .collect()
    }
}

impl Tools for Gateway {
    fn execute(&self, set: &SearchQuerySet) -> Result<Observation, ToolError> {
        let batch = self.search_batch(set.modality, &set.entries).map_err(|e| match e {
            GatewayError::EmptyQuery => ToolError::Rejected(e.to_string()),
            other => ToolError::Unavailable(other.to_string()),
        })?;
        Ok(render_observation(set.modality, &batch))
    }
}

impl<T: Tools + ?Sized> Tools for Arc<T> {
    fn execute(&self, set: &SearchQuerySet) -> Result<Observation, ToolError> {
        (**self).execute(set)
    }
}

/// How a command reaches its tools: `local:<index path>`, `external:<adapter>`
/// (endpoint from `GMNER_SEARCH_URL`) or an `http://` gateway base URL.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolSpec {
    Local(std::path::PathBuf),
    External(String),
    Http(String),
}

impl ToolSpec {
    pub fn parse(spec: &str) -> Result<Self, ToolError> {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(ToolSpec::Http(spec.trim_end_matches('/').to_string()));
        }
        match spec.split_once(':') {
            Some(("local", p)) if !p.is_empty() => Ok(ToolSpec::Local(p.into())),
            Some(("external", a)) if !a.is_empty() => Ok(ToolSpec::External(a.into())),
            _ => Err(ToolError::Rejected(format!(
                "invalid tools spec {spec:?} (expected local:<path>, external:<adapter> or http://host:port)"
            ))),
        }
    }

    /// Opens the handle. `cache` applies to in-process gateways only.
    pub fn open(&self, cache: SearchCache, k_results: usize, timeout: Duration) -> Result<Arc<dyn Tools>, ToolError> {
        Ok(match self {
            ToolSpec::Local(p) => {
                let index = LocalIndex::load(p).map_err(|e| ToolError::Unavailable(e.to_string()))?;
                Arc::new(Gateway::new(Arc::new(index), cache, k_results))
            }
            ToolSpec::External(adapter) => {
                let url = std::env::var(backend::ENV_SEARCH_URL)
                    .map_err(|_| ToolError::Unavailable(format!("{} is not set", backend::ENV_SEARCH_URL)))?;
                Arc::new(Gateway::new(
                    Arc::new(ExternalEngine::new(adapter.clone(), url, timeout)),
                    cache,
                    k_results,
                ))
            }
            ToolSpec::Http(base) => Arc::new(http::RemoteTools::new(base.clone(), timeout)),
        })
    }
}
