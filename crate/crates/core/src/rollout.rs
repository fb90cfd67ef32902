//! The multi-turn reason-then-act loop.
//!
//! Each turn the policy generates one segment. A search action is executed
//! through [`Tools`] and its observation appended as an `<information>` block;
//! an answer ends the trajectory; an unparseable or over-long segment is
//! answered with [`INVALID_FEEDBACK`]. The loop stops with
//! [`TrajectoryStatus::BudgetExhausted`] once `max_actions` searches have run,
//! and with [`TrajectoryStatus::Invalid`] once more than `max_invalid_retries`
//! segments were invalid.
//!
//! The transcript is append-only: the prompt, then for each turn a newline and
//! the generated segment, then (for searches and retried invalid turns) a
//! newline, the injected text and a newline.

use serde::{Deserialize, Serialize};

use crate::exec::{derive_seed, Exec};
use crate::metrics::GoldSample;
use crate::policy::{GenerateRequest, Policy, PolicyError};
use crate::protocol::{
    parse_segment, Action, AnswerPayload, Modality, Observation, ProtocolError, SearchQuery, TurnSegment,
    INVALID_FEEDBACK, STOP_TAGS,
};
use crate::toolgw::{ToolError, Tools};

pub const DEFAULT_MAX_ACTIONS: usize = 3;
pub const DEFAULT_MAX_INVALID_RETRIES: usize = 3;
pub const DEFAULT_MAX_RESPONSE_TOKENS: usize = 18_432;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub max_actions: usize,
    pub max_invalid_retries: usize,
    pub max_response_tokens: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_actions: DEFAULT_MAX_ACTIONS,
            max_invalid_retries: DEFAULT_MAX_INVALID_RETRIES,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.max_actions == 0 {
            return Err(RolloutError::InvalidConfig("max_actions must be at least 1".into()));
        }
        if self.max_response_tokens == 0 {
            return Err(RolloutError::InvalidConfig("max_response_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper bound on generated segments for any policy.
    pub fn max_turns(&self) -> usize {
        self.max_actions + self.max_invalid_retries + 1
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error("group size {0} is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("trajectory {trajectory_id} aborted: {source}")]
    PolicyUnavailable {
        trajectory_id: String,
        #[source]
        source: PolicyError,
    },
    #[error("trajectory {trajectory_id} aborted: {source}")]
    ToolUnavailable {
        trajectory_id: String,
        #[source]
        source: ToolError,
    },
}

/// The post a trajectory is about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostInput {
    pub id: String,
    pub text: String,
    pub image_ref: String,
}

impl From<&GoldSample> for PostInput {
    fn from(s: &GoldSample) -> Self {
        PostInput {
            id: s.id.clone(),
            text: s.text.clone(),
            image_ref: s.image_ref.clone(),
        }
    }
}

/// Renders the opening prompt. `{text}`, `{image}` and `{instruction}` are substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(pub String);

pub const DEFAULT_PROMPT: &str = "Extract every named entity from the post as (span, type, bounding box). \
Think inside a reason block, then either search (text_search or image_search with JSON queries) \
or give the final answer block with JSON entities.\n{instruction}Text: {text}\nImage: {image}";

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate(DEFAULT_PROMPT.to_string())
    }
}

impl PromptTemplate {
    pub fn render(&self, input: &PostInput, instruction: &str) -> String {
        let instruction = if instruction.is_empty() || instruction.ends_with('\n') {
            instruction.to_string()
        } else {
            format!("{instruction}\n")
        };
        self.0
            .replace("{instruction}", &instruction)
            .replace("{text}", &input.text)
            .replace("{image}", &input.image_ref)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TurnError {
    Protocol { error: ProtocolError },
    TooLong { token_count: usize, limit: usize },
}

impl std::fmt::Display for TurnError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TurnError::Protocol { error } => write!(f, "{error}"),
            TurnError::TooLong { token_count, limit } => {
                write!(f, "segment of {token_count} tokens exceeds the limit of {limit}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TurnOutcome {
    Search { segment: TurnSegment, observation: Observation },
    Answer { segment: TurnSegment },
    /// `feedback` is false for the final invalid segment that ended the trajectory.
    Invalid { error: TurnError, feedback: bool },
}

/// One generated segment and what the environment did with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TurnRepr", into = "TurnRepr")]
pub struct Turn {
    pub raw: String,
    pub token_count: usize,
    pub outcome: TurnOutcome,
}

impl Turn {
    pub fn segment(&self) -> Option<&TurnSegment> {
        match &self.outcome {
            TurnOutcome::Search { segment, .. } | TurnOutcome::Answer { segment } => Some(segment),
            TurnOutcome::Invalid { .. } => None,
        }
    }

    pub fn observation(&self) -> Option<&Observation> {
        match &self.outcome {
            TurnOutcome::Search { observation, .. } => Some(observation),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        !matches!(self.outcome, TurnOutcome::Invalid { .. })
    }

    pub fn is_search(&self) -> bool {
        matches!(self.outcome, TurnOutcome::Search { .. })
    }

    /// Text the environment appended after this turn, without separators.
    pub fn injected(&self) -> Option<(RegionKind, String)> {
        match &self.outcome {
            TurnOutcome::Search { observation, .. } => Some((RegionKind::Observation, observation.to_tagged())),
            TurnOutcome::Invalid { feedback: true, .. } => Some((RegionKind::Feedback, INVALID_FEEDBACK.to_string())),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRepr {
    raw: String,
    token_count: usize,
    valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observation: Option<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<TurnError>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    feedback: bool,
}

impl From<Turn> for TurnRepr {
    fn from(t: Turn) -> Self {
        let (valid, observation, error, feedback) = match t.outcome {
            TurnOutcome::Search { observation, .. } => (true, Some(observation), None, false),
            TurnOutcome::Answer { .. } => (true, None, None, false),
            TurnOutcome::Invalid { error, feedback } => (false, None, Some(error), feedback),
        };
        TurnRepr {
            raw: t.raw,
            token_count: t.token_count,
            valid,
            observation,
            error,
            feedback,
        }
    }
}

impl TryFrom<TurnRepr> for Turn {
    type Error = String;

    fn try_from(r: TurnRepr) -> Result<Self, String> {
        let outcome = if r.valid {
            let segment = parse_segment(&r.raw).map_err(|e| format!("stored valid turn does not parse: {e}"))?;
            match (segment.action(), r.observation) {
                (Action::Search(_), Some(observation)) => TurnOutcome::Search { segment, observation },
                (Action::Answer(_), None) => TurnOutcome::Answer { segment },
                (Action::Search(_), None) => return Err("search turn without observation".into()),
                (Action::Answer(_), Some(_)) => return Err("answer turn with observation".into()),
            }
        } else {
            TurnOutcome::Invalid {
                error: r.error.ok_or("invalid turn without error")?,
                feedback: r.feedback,
            }
        };
        Ok(Turn {
            raw: r.raw,
            token_count: r.token_count,
            outcome,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Answered,
    BudgetExhausted,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub input: PostInput,
    pub prompt: String,
    pub turns: Vec<Turn>,
    #[serde(rename = "final", default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<AnswerPayload>,
    pub status: TrajectoryStatus,
    pub n_tool_calls: usize,
    pub transcript: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Prompt,
    Generated,
    Observation,
    Feedback,
}

impl RegionKind {
    /// Whether tokens in this region are trained on.
    pub fn supervised(self) -> bool {
        self == RegionKind::Generated
    }
}

/// A byte range `[start, end)` of the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kind: RegionKind,
    pub start: usize,
    pub end: usize,
}

impl Trajectory {
    /// Contiguous regions covering the whole transcript. Separating newlines
    /// belong to the surrounding environment text.
    pub fn regions(&self) -> Vec<Region> {
        let mut out = Vec::with_capacity(2 * self.turns.len() + 1);
        let mut pos = 0;
        let mut push = |kind, len: usize, out: &mut Vec<Region>| {
            out.push(Region {
                kind,
                start: pos,
                end: pos + len,
            });
            pos += len;
        };
        push(RegionKind::Prompt, self.prompt.len() + 1, &mut out);
        for t in &self.turns {
            push(RegionKind::Generated, t.raw.len(), &mut out);
            if let Some((kind, text)) = t.injected() {
                push(kind, text.len() + 2, &mut out);
            }
        }
        out
    }

    /// Rebuilds the transcript from prompt and turns.
    pub fn render_transcript(&self) -> String {
        let mut s = String::with_capacity(self.transcript.len());
        s.push_str(&self.prompt);
        s.push('\n');
        for t in &self.turns {
            s.push_str(&t.raw);
            if let Some((_, text)) = t.injected() {
                s.push('\n');
                s.push_str(&text);
                s.push('\n');
            }
        }
        s
    }

    /// Every turn parsed and a final answer was produced.
    pub fn format_ok(&self) -> bool {
        self.final_answer.is_some() && self.turns.iter().all(Turn::is_valid)
    }

    /// All issued search queries with their modality, in order.
    pub fn search_queries(&self) -> impl Iterator<Item = (Modality, &SearchQuery)> {
        self.turns.iter().filter_map(Turn::segment).flat_map(|s| match s.action() {
            Action::Search(set) => set.entries.iter().map(|q| (set.modality, q)).collect::<Vec<_>>(),
            Action::Answer(_) => Vec::new(),
        })
    }

    /// Structural invariants; returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        let searches = self.turns.iter().filter(|t| t.is_search()).count();
        if searches != self.n_tool_calls {
            return Err(format!("n_tool_calls {} but {searches} search turns", self.n_tool_calls));
        }
        if (self.status == TrajectoryStatus::Answered) != self.final_answer.is_some() {
            return Err("final answer present iff answered".into());
        }
        if self.render_transcript() != self.transcript {
            return Err("transcript does not match turns".into());
        }
        Ok(())
    }
}

/// Everything needed to run one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    pub trajectory_id: &'a str,
    pub input: &'a PostInput,
    pub prompt: &'a str,
    pub seed: u64,
}

pub fn run_rollout(
    req: RolloutRequest<'_>,
    policy: &dyn Policy,
    tools: &dyn Tools,
    cfg: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    cfg.validate()?;
    let mut transcript = String::with_capacity(req.prompt.len() + 1024);
    transcript.push_str(req.prompt);
    transcript.push('\n');
    let mut images = vec![req.input.image_ref.clone()];
    let mut turns = Vec::new();
    let mut n_tool_calls = 0;
    let mut n_invalid = 0;
    let mut final_answer = None;

    let status = loop {
        let gen = policy
            .generate(&GenerateRequest {
                trajectory_id: req.trajectory_id,
                turn_index: turns.len(),
                seed: req.seed,
                history: &transcript,
                images: &images,
                stop: &STOP_TAGS,
            })
            .map_err(|source| RolloutError::PolicyUnavailable {
                trajectory_id: req.trajectory_id.to_string(),
                source,
            })?;
        transcript.push_str(&gen.text);

        let parsed = if gen.token_count > cfg.max_response_tokens {
            Err(TurnError::TooLong {
                token_count: gen.token_count,
                limit: cfg.max_response_tokens,
            })
        } else {
            parse_segment(&gen.text).map_err(|error| TurnError::Protocol { error })
        };

        let outcome = match parsed {
            Ok(segment) => match segment.action() {
                Action::Answer(a) => {
                    final_answer = Some(a.clone());
                    TurnOutcome::Answer { segment }
                }
                Action::Search(set) => {
                    let observation = tools.execute(set).map_err(|source| RolloutError::ToolUnavailable {
                        trajectory_id: req.trajectory_id.to_string(),
                        source,
                    })?;
                    n_tool_calls += 1;
                    images.extend(observation.images.iter().cloned());
                    TurnOutcome::Search { segment, observation }
                }
            },
            Err(error) => {
                n_invalid += 1;
                TurnOutcome::Invalid {
                    error,
                    feedback: n_invalid <= cfg.max_invalid_retries,
                }
            }
        };
        let turn = Turn {
            raw: gen.text,
            token_count: gen.token_count,
            outcome,
        };
        if let Some((_, text)) = turn.injected() {
            transcript.push('\n');
            transcript.push_str(&text);
            transcript.push('\n');
        }
        let done = match &turn.outcome {
            TurnOutcome::Answer { .. } => Some(TrajectoryStatus::Answered),
            TurnOutcome::Search { .. } if n_tool_calls >= cfg.max_actions => Some(TrajectoryStatus::BudgetExhausted),
            TurnOutcome::Invalid { feedback: false, .. } => Some(TrajectoryStatus::Invalid),
            _ => None,
        };
        turns.push(turn);
        if let Some(s) = done {
            break s;
        }
    };

    Ok(Trajectory {
        id: req.trajectory_id.to_string(),
        input: req.input.clone(),
        prompt: req.prompt.to_string(),
        turns,
        final_answer,
        status,
        n_tool_calls,
        transcript,
    })
}

/// Id of member `i` of the group rolled out for `sample_id`.
pub fn member_id(sample_id: &str, i: usize) -> String {
    format!("{sample_id}#{i}")
}

/// Part of a trajectory id before the member suffix.
pub fn group_of(trajectory_id: &str) -> &str {
    trajectory_id.split('#').next().unwrap_or(trajectory_id)
}

/// Rolls out `g` members for one input. Member `i` uses seed `derive_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn run_group(
    input: &PostInput,
    prompt: &str,
    policy: &dyn Policy,
    tools: &dyn Tools,
    cfg: &RolloutConfig,
    g: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Trajectory>, RolloutError> {
    if g < 2 {
        return Err(RolloutError::GroupTooSmall(g));
    }
    cfg.validate()?;
    let ids: Vec<String> = (0..g).map(|i| member_id(&input.id, i)).collect();
    let seeds: Vec<(usize, &String)> = ids.iter().enumerate().collect();
    exec.try_map(&seeds, |(i, id)| {
        run_rollout(
            RolloutRequest {
                trajectory_id: id,
                input,
                prompt,
                seed: derive_seed(seed, *i as u64),
            },
            policy,
            tools,
            cfg,
        )
    })
}
