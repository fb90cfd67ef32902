//! Search backends and summarizers behind the gateway.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SearchResult;
use crate::jsonl;
use crate::policy::{GenerateRequest, Policy};
use crate::protocol::Modality;

pub const ENV_SEARCH_URL: &str = "GMNER_SEARCH_URL";
pub const ENV_SEARCH_API_KEY: &str = "GMNER_SEARCH_API_KEY";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("search backend {backend} unavailable: {detail}")]
    Unavailable { backend: String, detail: String },
    #[error("index: {0}")]
    Index(String),
}

pub trait SearchBackend: Send + Sync {
    /// Raw results for one query, best first. The gateway truncates to K.
    fn search(&self, query: &str, modality: Modality, k: usize) -> Result<Vec<SearchResult>, BackendError>;

    fn id(&self) -> String;
}

/// A document in a local index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexDoc {
    pub modality: Modality,
    pub title: String,
    pub snippet: String,
    pub url: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

/// Deterministic keyword index. A document scores the number of distinct
/// query words found among its title, snippet and keyword words; documents
/// scoring zero are dropped, ties keep file order.
#[derive(Debug, Clone, Default)]
pub struct LocalIndex {
    docs: Vec<(IndexDoc, HashSet<String>)>,
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl LocalIndex {
    pub fn new(docs: impl IntoIterator<Item = IndexDoc>) -> Self {
        let docs = docs
            .into_iter()
            .map(|d| {
                let mut vocab: HashSet<String> = words(&d.title).chain(words(&d.snippet)).collect();
                for k in &d.keywords {
                    vocab.extend(words(k));
                }
                (d, vocab)
            })
            .collect();
        LocalIndex { docs }
    }

    /// Reads a JSONL file of [`IndexDoc`], or every `*.jsonl` file of a directory in name order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let files = if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| BackendError::Index(format!("{}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            files
        } else {
            vec![path.to_path_buf()]
        };
        let mut docs = Vec::new();
        for f in files {
            docs.extend(jsonl::read::<IndexDoc>(&f).map_err(|e| BackendError::Index(e.to_string()))?);
        }
        Ok(Self::new(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl SearchBackend for LocalIndex {
    fn search(&self, query: &str, modality: Modality, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        let q: HashSet<String> = words(query).collect();
        let mut scored: Vec<(usize, usize)> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(_, (d, _))| d.modality == modality)
            .map(|(i, (_, vocab))| (q.iter().filter(|w| vocab.contains(*w)).count(), i))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(_, i)| {
                let d = &self.docs[i].0;
                SearchResult {
                    title: d.title.clone(),
                    summary: d.snippet.clone(),
                    url: d.url.clone(),
                    image_ref: d.image_ref.clone(),
                    degraded: false,
                }
            })
            .collect())
    }

    fn id(&self) -> String {
        "local-index".into()
    }
}

#[derive(Debug, Serialize)]
struct EngineRequest<'a> {
    adapter: &'a str,
    query: &'a str,
    modality: Modality,
    k: usize,
}

#[derive(Debug, Deserialize)]
struct EngineResponse {
    results: Vec<SearchResult>,
}

/// HTTP seam for an external search engine. The adapter service receives
/// `{"adapter","query","modality","k"}` and answers `{"results":[SearchResult]}`;
/// the API key (from `GMNER_SEARCH_API_KEY`) is sent as a bearer token.
#[derive(Debug, Clone)]
pub struct ExternalEngine {
    adapter_id: String,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl ExternalEngine {
    pub fn new(adapter_id: impl Into<String>, url: impl Into<String>, timeout: Duration) -> Self {
        ExternalEngine {
            adapter_id: adapter_id.into(),
            url: url.into(),
            api_key: std::env::var(ENV_SEARCH_API_KEY).ok(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }
}

impl SearchBackend for ExternalEngine {
    fn search(&self, query: &str, modality: Modality, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        let unavailable = |detail: String| BackendError::Unavailable {
            backend: self.id(),
            detail,
        };
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&EngineRequest {
                adapter: &self.adapter_id,
                query,
                modality,
                k,
            })
            .map_err(|e| unavailable(e.to_string()))?;
        let body: EngineResponse = resp.body_mut().read_json().map_err(|e| unavailable(e.to_string()))?;
        Ok(body.results)
    }

    fn id(&self) -> String {
        format!("external:{}", self.adapter_id)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("summarizer unavailable: {0}")]
pub struct SummarizerError(pub String);

pub trait Summarizer: Send + Sync {
    fn summarize(&self, query: &str, result: &SearchResult) -> Result<String, SummarizerError>;
}

/// Keeps the backend snippet as the summary.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentitySummarizer;

impl Summarizer for IdentitySummarizer {
    fn summarize(&self, _query: &str, result: &SearchResult) -> Result<String, SummarizerError> {
        Ok(result.summary.clone())
    }
}

/// Summarises through any [`Policy`] backend, typically a remote model.
pub struct PolicySummarizer {
    policy: Arc<dyn Policy>,
}

impl PolicySummarizer {
    pub fn new(policy: Arc<dyn Policy>) -> Self {
        PolicySummarizer { policy }
    }
}

impl Summarizer for PolicySummarizer {
    fn summarize(&self, query: &str, result: &SearchResult) -> Result<String, SummarizerError> {
        let prompt = format!(
            "Summarize the following page in at most two sentences, keeping facts relevant to the query.\nQuery: {query}\nTitle: {}\nContent: {}",
            result.title, result.summary
        );
        self.policy
            .generate(&GenerateRequest {
                trajectory_id: "summarizer",
                turn_index: 0,
                seed: 0,
                history: &prompt,
                images: &[],
                stop: &[],
            })
            .map(|g| g.text.trim().to_string())
            .map_err(|e| SummarizerError(e.to_string()))
    }
}
