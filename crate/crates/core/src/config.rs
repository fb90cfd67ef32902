//! Run configuration: one TOML file holding every hyperparameter, with
//! defaults for anything omitted. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [endpoints]
//! policy = "scripted:fixtures/policy.jsonl"   # or replay:<path>, remote:<url>
//! teacher = "scripted:fixtures/teacher.jsonl"
//! tools = "local:fixtures/index"              # or external:<adapter>, http://host:port
//! model = "default"
//! timeout_secs = 60
//!
//! [rollout]
//! max_actions = 3
//! max_invalid_retries = 3
//! max_response_tokens = 18432
//! group_size = 8
//!
//! [tools]
//! k_results = 3
//! cache_threshold = 0.9
//! # cache_path = "cache.jsonl"
//!
//! [tagger]
//! n_samples = 4
//! iou_threshold = 0.5
//! # temperature = 1.0
//! instruction = ""
//!
//! [reward]
//! lambda_f1 = 0.9
//! lambda_fmt = 0.1
//! lambda_search = 0.01
//! gamma = 0.8
//!
//! [grpo]
//! clip_eps = 0.2
//! kl_beta = 0.001
//!
//! [secot]
//! resample = 0
//!
//! [prompt]
//! # template = "...{instruction}...{text}...{image}"
//! # template_path = "prompt.txt"
//!
//! [eval]
//! # task = "gmner"     # unset reports every task
//! unseen = "mention"   # or mention_type, mention_grounding
//! format = "md"        # or csv, json
//!
//! [paths]
//! # corpus = "data/train.jsonl"
//! # out = "runs/rollouts.jsonl"
//! ```
//!
//! `[paths]` holds the input and output files of a command; flags of the same
//! name override it. Every command writes its resolved config, paths
//! included, next to its outputs, so `--config <echo>` repeats the run.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::grpo::{DEFAULT_CLIP_EPS, DEFAULT_GROUP_SIZE, DEFAULT_KL_BETA};
use crate::metrics::{Task, UnseenCriterion};
use crate::reward::RewardConfig;
use crate::rollout::{PromptTemplate, RolloutConfig};
use crate::tagger::DEFAULT_N_SAMPLES;
use crate::toolgw::{DEFAULT_CACHE_THRESHOLD, DEFAULT_K_RESULTS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Endpoints {
    pub policy: Option<String>,
    /// Teacher used for cold-start synthesis.
    pub teacher: Option<String>,
    pub tools: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for Endpoints {
    fn default() -> Self {
        Endpoints {
            policy: None,
            teacher: None,
            tools: None,
            model: "default".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub max_actions: usize,
    pub max_invalid_retries: usize,
    pub max_response_tokens: usize,
    pub group_size: usize,
    /// Line placed before the post in rollout prompts.
    pub instruction: String,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        RolloutSection {
            max_actions: r.max_actions,
            max_invalid_retries: r.max_invalid_retries,
            max_response_tokens: r.max_response_tokens,
            group_size: DEFAULT_GROUP_SIZE,
            instruction: String::new(),
        }
    }
}

impl RolloutSection {
    pub fn config(&self) -> RolloutConfig {
        RolloutConfig {
            max_actions: self.max_actions,
            max_invalid_retries: self.max_invalid_retries,
            max_response_tokens: self.max_response_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolsSection {
    pub k_results: usize,
    pub cache_threshold: f64,
    pub cache_path: Option<PathBuf>,
}

impl Default for ToolsSection {
    fn default() -> Self {
        ToolsSection {
            k_results: DEFAULT_K_RESULTS,
            cache_threshold: DEFAULT_CACHE_THRESHOLD,
            cache_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaggerSection {
    pub n_samples: usize,
    pub iou_threshold: f64,
    /// Sampling temperature passed to remote policies; unset leaves the endpoint default.
    pub temperature: Option<f64>,
    pub instruction: String,
}

impl Default for TaggerSection {
    fn default() -> Self {
        TaggerSection {
            n_samples: DEFAULT_N_SAMPLES,
            iou_threshold: crate::metrics::IOU_THRESHOLD,
            temperature: None,
            instruction: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSection {
    pub clip_eps: f64,
    pub kl_beta: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        GrpoSection {
            clip_eps: DEFAULT_CLIP_EPS,
            kl_beta: DEFAULT_KL_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecotSection {
    /// Extra attempts for a rejected sample.
    pub resample: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub template: Option<String>,
    pub template_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Md,
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Report one task; unset reports all three.
    pub task: Option<Task>,
    pub unseen: UnseenCriterion,
    pub format: TableFormat,
}

/// Files read and written by the CLI commands. Each command uses the keys it needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub train: Option<PathBuf>,
    /// JSONL whose `id` fields pick the posts to roll out.
    pub ids: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub rollouts: Option<PathBuf>,
    pub rewarded: Option<PathBuf>,
    pub secot: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub endpoints: Endpoints,
    pub rollout: RolloutSection,
    pub tools: ToolsSection,
    pub tagger: TaggerSection,
    pub reward: RewardConfig,
    pub grpo: GrpoSection,
    pub secot: SecotSection,
    pub prompt: PromptSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.rollout.config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.rollout.group_size < 2 {
            return bad(format!("rollout.group_size must be at least 2, got {}", self.rollout.group_size));
        }
        if self.tools.k_results == 0 {
            return bad("tools.k_results must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tools.cache_threshold) {
            return bad(format!("tools.cache_threshold must lie in [0, 1], got {}", self.tools.cache_threshold));
        }
        if self.tagger.n_samples == 0 {
            return bad("tagger.n_samples must be at least 1".into());
        }
        if !(self.tagger.iou_threshold > 0.0 && self.tagger.iou_threshold < 1.0) {
            return bad(format!("tagger.iou_threshold must lie in (0, 1), got {}", self.tagger.iou_threshold));
        }
        self.reward.validate().map_err(|e| ConfigError::Invalid(format!("reward: {e}")))?;
        if !(self.grpo.clip_eps >= 0.0 && self.grpo.kl_beta >= 0.0) {
            return bad("grpo.clip_eps and grpo.kl_beta must be non-negative".into());
        }
        if self.prompt.template.is_some() && self.prompt.template_path.is_some() {
            return bad("set at most one of prompt.template and prompt.template_path".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.endpoints.timeout_secs)
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate, ConfigError> {
        if let Some(t) = &self.prompt.template {
            return Ok(PromptTemplate(t.clone()));
        }
        if let Some(p) = &self.prompt.template_path {
            return std::fs::read_to_string(p)
                .map(PromptTemplate)
                .map_err(|source| ConfigError::Io { path: p.clone(), source });
        }
        Ok(PromptTemplate::default())
    }
}
