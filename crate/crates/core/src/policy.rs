//! The generation interface rollouts consume, with three backends:
//!
//! * `scripted:<fixture.jsonl>` replays hand-written turns. Each fixture line is
//!   `{"trajectory_id": str, "turn_index": int, "text": str}`. Lookups fall back
//!   from the exact id, to the group id (the part before `#`), to `"*"`.
//!   Several lines with the same key are alternatives; one is picked from the
//!   request seed, which makes a fixture a small stochastic policy.
//! * `replay:<trajectories.jsonl>` reproduces stored trajectories turn by turn.
//! * `remote:<url>` posts a chat-style JSON request to an HTTP endpoint.
//!   `GMNER_POLICY_URL` and `GMNER_POLICY_TOKEN` supply the endpoint and bearer
//!   token when not given explicitly.
//!
//! Lookups are keyed by `(trajectory_id, turn_index)`, so one handle serves
//! concurrent rollouts without shared cursors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::derive_seed;
use crate::jsonl::{self, JsonlError};
use crate::protocol::{truncate_at_stop, STOP_TAGS};
use crate::rollout::Trajectory;

pub const ENV_POLICY_URL: &str = "GMNER_POLICY_URL";
pub const ENV_POLICY_TOKEN: &str = "GMNER_POLICY_TOKEN";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("fixture exhausted for trajectory {trajectory_id:?} at turn {turn_index}")]
    FixtureExhausted { trajectory_id: String, turn_index: usize },
    #[error("policy endpoint {url} timed out")]
    EndpointTimeout { url: String },
    #[error("policy endpoint {url}: {detail}")]
    Endpoint { url: String, detail: String },
    #[error("fixture: {0}")]
    Fixture(String),
    #[error("invalid policy spec {0:?} (expected scripted:<path>, replay:<path> or remote:<url>)")]
    InvalidSpec(String),
}

impl From<JsonlError> for PolicyError {
    fn from(e: JsonlError) -> Self {
        PolicyError::Fixture(e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub trajectory_id: &'a str,
    pub turn_index: usize,
    pub seed: u64,
    pub history: &'a str,
    pub images: &'a [String],
    pub stop: &'a [&'a str],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub token_count: usize,
}

pub trait Policy: Send + Sync {
    /// Generates one segment, ending at the first closing tag in `req.stop`.
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError>;

    /// Draws `n` independent samples for `prompt`. Sample `k` is generated as
    /// turn `k` of trajectory `key` with a seed derived from `(seed, k)`.
    fn sample_n(&self, key: &str, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, PolicyError> {
        if n == 0 {
            return Err(PolicyError::ZeroSamples);
        }
        (0..n)
            .map(|k| {
                self.generate(&GenerateRequest {
                    trajectory_id: key,
                    turn_index: k,
                    seed: derive_seed(seed, k as u64),
                    history: prompt,
                    images: &[],
                    stop: &STOP_TAGS,
                })
                .map(|g| g.text)
            })
            .collect()
    }

    fn id(&self) -> String {
        "policy".to_string()
    }
}

/// Token count reported by the offline backends: whitespace-separated words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub trajectory_id: String,
    pub turn_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    // trajectory id -> turn -> alternatives
    scripts: HashMap<String, Vec<Vec<String>>>,
    name: String,
}

impl ScriptedPolicy {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut scripts: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for e in entries {
            let turns = scripts.entry(e.trajectory_id).or_default();
            if turns.len() <= e.turn_index {
                turns.resize(e.turn_index + 1, Vec::new());
            }
            turns[e.turn_index].push(e.text);
        }
        ScriptedPolicy {
            scripts,
            name: "scripted".into(),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let mut p = Self::from_entries(jsonl::read::<FixtureEntry>(path)?);
        p.name = format!("scripted:{}", path.display());
        Ok(p)
    }

    fn script(&self, trajectory_id: &str) -> Option<&Vec<Vec<String>>> {
        let group = trajectory_id.split('#').next().unwrap_or(trajectory_id);
        self.scripts
            .get(trajectory_id)
            .or_else(|| self.scripts.get(group))
            .or_else(|| self.scripts.get("*"))
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        if req.history.is_empty() {
            return Err(PolicyError::EmptyHistory);
        }
        let exhausted = || PolicyError::FixtureExhausted {
            trajectory_id: req.trajectory_id.to_string(),
            turn_index: req.turn_index,
        };
        let alts = self
            .script(req.trajectory_id)
            .and_then(|s| s.get(req.turn_index))
            .filter(|a| !a.is_empty())
            .ok_or_else(exhausted)?;
        let chosen = if alts.len() == 1 {
            &alts[0]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, req.turn_index as u64));
            &alts[rng.random_range(0..alts.len())]
        };
        let text = truncate_at_stop(chosen, req.stop).to_string();
        let token_count = word_count(&text);
        Ok(Generation { text, token_count })
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

/// Replays the turns of stored trajectories exactly.
#[derive(Debug, Clone, Default)]
pub struct ReplayPolicy {
    turns: HashMap<String, Vec<Generation>>,
}

impl ReplayPolicy {
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let turns = trajs
            .into_iter()
            .map(|t| {
                let gens = t
                    .turns
                    .iter()
                    .map(|turn| Generation {
                        text: turn.raw.clone(),
                        token_count: turn.token_count,
                    })
                    .collect();
                (t.id.clone(), gens)
            })
            .collect();
        ReplayPolicy { turns }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let trajs: Vec<Trajectory> = jsonl::read(path)?;
        Ok(Self::from_trajectories(&trajs))
    }
}

impl Policy for ReplayPolicy {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        if req.history.is_empty() {
            return Err(PolicyError::EmptyHistory);
        }
        self.turns
            .get(req.trajectory_id)
            .and_then(|t| t.get(req.turn_index))
            .cloned()
            .ok_or_else(|| PolicyError::FixtureExhausted {
                trajectory_id: req.trajectory_id.to_string(),
                turn_index: req.turn_index,
            })
    }

    fn id(&self) -> String {
        "replay".into()
    }
}

/// Request body posted to a remote policy endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub model: String,
    pub history: String,
    pub images: Vec<String>,
    pub stop: Vec<String>,
    pub max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub seed: u64,
    pub trajectory_id: String,
    pub turn_index: usize,
}

/// Response body expected from a remote policy endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
    #[serde(default)]
    pub token_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RemotePolicy {
    url: String,
    model: String,
    token: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: usize,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemotePolicy {
            url: url.into(),
            model: model.into(),
            token: std::env::var(ENV_POLICY_TOKEN).ok(),
            temperature: None,
            max_tokens: 18_432,
            agent,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Policy for RemotePolicy {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        if req.history.is_empty() {
            return Err(PolicyError::EmptyHistory);
        }
        let body = RemoteRequest {
            model: self.model.clone(),
            history: req.history.to_string(),
            images: req.images.to_vec(),
            stop: req.stop.iter().map(|s| s.to_string()).collect(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            seed: req.seed,
            trajectory_id: req.trajectory_id.to_string(),
            turn_index: req.turn_index,
        };
        let url = self.url.clone();
        let endpoint_err = |detail: String| PolicyError::Endpoint {
            url: url.clone(),
            detail,
        };
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => PolicyError::EndpointTimeout { url: url.clone() },
            other => endpoint_err(other.to_string()),
        };
        let mut call = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send_json(&body).map_err(map_err)?;
        if !resp.status().is_success() {
            let status = resp.status();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(endpoint_err(format!("HTTP {status}: {text}")));
        }
        let out: RemoteResponse = resp.body_mut().read_json().map_err(map_err)?;
        // Endpoints may ignore stop sequences.
        let text = truncate_at_stop(&out.text, req.stop).to_string();
        let token_count = match out.token_count {
            Some(n) if text.len() == out.text.len() => n,
            _ => word_count(&text),
        };
        Ok(Generation { text, token_count })
    }

    fn id(&self) -> String {
        format!("remote:{}#{}", self.url, self.model)
    }
}

/// A policy backend selected by a `kind:target` spec string.
#[derive(Debug, Clone)]
pub enum PolicyHandle {
    Scripted(ScriptedPolicy),
    Remote(RemotePolicy),
    Replay(ReplayPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Scripted(PathBuf),
    Replay(PathBuf),
    Remote(String),
}

impl PolicySpec {
    pub fn parse(spec: &str) -> Result<Self, PolicyError> {
        let invalid = || PolicyError::InvalidSpec(spec.to_string());
        let (kind, target) = spec.split_once(':').ok_or_else(invalid)?;
        match kind {
            "scripted" if !target.is_empty() => Ok(PolicySpec::Scripted(target.into())),
            "replay" if !target.is_empty() => Ok(PolicySpec::Replay(target.into())),
            "remote" => {
                let url = if target.is_empty() {
                    std::env::var(ENV_POLICY_URL).map_err(|_| invalid())?
                } else {
                    target.to_string()
                };
                Ok(PolicySpec::Remote(url))
            }
            _ => Err(invalid()),
        }
    }
}

impl PolicyHandle {
    pub fn open(spec: &PolicySpec, model: &str, timeout: Duration) -> Result<Self, PolicyError> {
        Ok(match spec {
            PolicySpec::Scripted(p) => PolicyHandle::Scripted(ScriptedPolicy::from_path(p)?),
            PolicySpec::Replay(p) => PolicyHandle::Replay(ReplayPolicy::from_path(p)?),
            PolicySpec::Remote(url) => PolicyHandle::Remote(RemotePolicy::new(url, model, timeout)),
        })
    }

    fn inner(&self) -> &dyn Policy {
        match self {
            PolicyHandle::Scripted(p) => p,
            PolicyHandle::Remote(p) => p,
            PolicyHandle::Replay(p) => p,
        }
    }
}

impl Policy for PolicyHandle {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        self.inner().generate(req)
    }

    fn sample_n(&self, key: &str, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, PolicyError> {
        self.inner().sample_n(key, prompt, n, seed)
    }

    fn id(&self) -> String {
        self.inner().id()
    }
}
