//! Similarity-keyed result cache with append-only JSONL persistence.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::similarity::{normalize_query, ratio_chars};
use super::SearchResult;
use crate::jsonl;
use crate::protocol::Modality;

/// Cached results are served when similarity strictly exceeds this.
pub const DEFAULT_CACHE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key_query: String,
    pub modality: Modality,
    pub results: Vec<SearchResult>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

struct Keyed {
    chars: Vec<char>,
    entry: CacheEntry,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache file: {0}")]
    Load(#[from] jsonl::JsonlError),
}

/// Concurrent reads, serialised writes. Entries are never modified once stored.
pub struct SearchCache {
    threshold: f64,
    text: RwLock<Vec<Keyed>>,
    image: RwLock<Vec<Keyed>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheHit {
    pub key_query: String,
    pub similarity: f64,
    pub results: Vec<SearchResult>,
}

impl SearchCache {
    pub fn in_memory(threshold: f64) -> Self {
        SearchCache {
            threshold,
            text: RwLock::default(),
            image: RwLock::default(),
            file: None,
        }
    }

    /// Loads existing entries from `path` (if present) and appends new ones to it.
    pub fn persistent(path: impl AsRef<Path>, threshold: f64) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self::in_memory(threshold);
        if path.exists() {
            for e in jsonl::read::<CacheEntry>(&path)? {
                cache.push(e);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| CacheError::Io {
                path: path.clone(),
                source,
            })?;
        cache.file = Some((path, Mutex::new(file)));
        Ok(cache)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn shard(&self, m: Modality) -> &RwLock<Vec<Keyed>> {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    fn push(&mut self, entry: CacheEntry) {
        let chars = normalize_query(&entry.key_query).chars().collect();
        let shard = match entry.modality {
            Modality::Text => &mut self.text,
            Modality::Image => &mut self.image,
        };
        shard.get_mut().expect("cache lock").push(Keyed { chars, entry });
    }

    pub fn len(&self) -> usize {
        self.text.read().expect("cache lock").len() + self.image.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most similar entry of the same modality whose similarity exceeds the
    /// threshold; the earliest stored entry wins ties.
    pub fn lookup(&self, query: &str, modality: Modality) -> Option<CacheHit> {
        let q: Vec<char> = normalize_query(query).chars().collect();
        let shard = self.shard(modality).read().expect("cache lock");
        let mut best: Option<(f64, &Keyed)> = None;
        for k in shard.iter() {
            let total = (q.len() + k.chars.len()) as f64;
            let bound = if total == 0.0 {
                1.0
            } else {
                2.0 * q.len().min(k.chars.len()) as f64 / total
            };
            if bound <= self.threshold || best.is_some_and(|(s, _)| bound <= s) {
                continue;
            }
            let s = ratio_chars(&q, &k.chars);
            if s > self.threshold && best.is_none_or(|(b, _)| s > b) {
                best = Some((s, k));
            }
        }
        best.map(|(similarity, k)| CacheHit {
            key_query: k.entry.key_query.clone(),
            similarity,
            results: k.entry.results.clone(),
        })
    }

    pub fn insert(&self, query: &str, modality: Modality, results: Vec<SearchResult>) -> Result<(), CacheError> {
        let entry = CacheEntry {
            key_query: query.to_string(),
            modality,
            results,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut shard = self.shard(modality).write().expect("cache lock");
        if let Some((path, file)) = &self.file {
            let mut line = jsonl::to_line(&entry);
            line.push('\n');
            file.lock()
                .expect("cache file lock")
                .write_all(line.as_bytes())
                .map_err(|source| CacheError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        shard.push(Keyed {
            chars: normalize_query(query).chars().collect(),
            entry,
        });
        Ok(())
    }

    pub fn entries(&self, modality: Modality) -> Vec<CacheEntry> {
        self.shard(modality)
            .read()
            .expect("cache lock")
            .iter()
            .map(|k| k.entry.clone())
            .collect()
    }
}
