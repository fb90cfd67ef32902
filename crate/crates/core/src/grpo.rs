//! Group-relative advantages, generated-token masks and the clipped surrogate.
//!
//! Advantages standardise each reward against its group with the sample
//! (n − 1) standard deviation; a group of equal rewards gets all-zero
//! advantages. The objective for one trajectory is
//!
//! ```text
//! (1/|U|) Σ_{t∈U} [ min(ρ_t·A, clip(ρ_t, 1−ε, 1+ε)·A) − β·k3_t ]
//! ρ_t  = exp(logp_new − logp_old)
//! k3_t = exp(Δ) − Δ − 1,  Δ = logp_ref − logp_new
//! ```
//!
//! where `U` is the set of unmasked (agent-generated) tokens. Prompt tokens,
//! `<information>` observations and retry feedback are masked out.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::jsonl::{self, JsonlError};
use crate::policy::word_count;
use crate::reward::{RewardBreakdown, RewardedTrajectory};
use crate::rollout::{group_of, RegionKind, Trajectory};

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_KL_BETA: f64 = 0.001;
pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group of {0} is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("every token is masked")]
    AllMasked,
    #[error("token arrays differ in length: {0}")]
    LengthMismatch(String),
    #[error("span map does not fit trajectory {trajectory_id}: {detail}")]
    SpanMapMismatch { trajectory_id: String, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageGroup, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("rewards"));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(AdvantageGroup {
            rewards: rewards.to_vec(),
            mean: rewards[0],
            std: 0.0,
            advantages: vec![0.0; n],
        });
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages: rewards.iter().map(|r| (r - mean) / std).collect(),
    })
}

/// A run of tokens `[start, end)` of one region kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub kind: RegionKind,
}

/// Where each transcript region lies in the token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMap {
    pub n_tokens: usize,
    pub spans: Vec<TokenSpan>,
}

impl SpanMap {
    /// Builds a map from per-region token counts. Generated regions use the
    /// policy-reported `token_count`; environment text is counted by `count`.
    pub fn from_trajectory(traj: &Trajectory, count: &dyn Fn(&str) -> usize) -> Self {
        let mut gen_counts = traj.turns.iter().map(|t| t.token_count);
        let mut spans = Vec::new();
        let mut pos = 0;
        for r in traj.regions() {
            let n = match r.kind {
                RegionKind::Generated => gen_counts.next().unwrap_or(0),
                _ => count(&traj.transcript[r.start..r.end]),
            };
            spans.push(TokenSpan {
                start: pos,
                end: pos + n,
                kind: r.kind,
            });
            pos += n;
        }
        SpanMap { n_tokens: pos, spans }
    }

    /// Whitespace-word counting, matching the offline policy backends.
    pub fn words(traj: &Trajectory) -> Self {
        Self::from_trajectory(traj, &word_count)
    }

    pub fn count(&self, kind: RegionKind) -> usize {
        self.spans.iter().filter(|s| s.kind == kind).map(|s| s.end - s.start).sum()
    }
}

/// 1 on agent-generated tokens, 0 on prompt, observation and feedback tokens.
pub fn mask_trajectory(traj: &Trajectory, map: &SpanMap) -> Result<Vec<u8>, GrpoError> {
    let mismatch = |detail: String| GrpoError::SpanMapMismatch {
        trajectory_id: traj.id.clone(),
        detail,
    };
    let regions = traj.regions();
    if regions.len() != map.spans.len() {
        return Err(mismatch(format!(
            "{} regions but {} spans",
            regions.len(),
            map.spans.len()
        )));
    }
    let mut mask = Vec::with_capacity(map.n_tokens);
    let mut pos = 0;
    for (i, (r, s)) in regions.iter().zip(&map.spans).enumerate() {
        if r.kind != s.kind {
            return Err(mismatch(format!("span {i} is {:?}, region is {:?}", s.kind, r.kind)));
        }
        if s.start != pos || s.end < s.start {
            return Err(mismatch(format!("span {i} [{}, {}) is not contiguous at {pos}", s.start, s.end)));
        }
        let bit = u8::from(s.kind.supervised());
        mask.extend(std::iter::repeat_n(bit, s.end - s.start));
        pos = s.end;
    }
    if pos != map.n_tokens {
        return Err(mismatch(format!("spans cover {pos} of {} tokens", map.n_tokens)));
    }
    Ok(mask)
}

/// Per-token inputs of the surrogate for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub mask: Vec<u8>,
    pub advantage: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_term(rho: f64, advantage: f64, eps: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Non-negative KL estimate from the two log-probabilities of one token.
pub fn k3(logp_ref: f64, logp_new: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp() - d - 1.0
}

pub fn surrogate_objective(b: &TokenBatch) -> Result<f64, GrpoError> {
    let n = b.mask.len();
    for (name, v) in [("logp_new", &b.logp_new), ("logp_old", &b.logp_old), ("logp_ref", &b.logp_ref)] {
        if v.len() != n {
            return Err(GrpoError::LengthMismatch(format!("{name} has {} entries, mask {n}", v.len())));
        }
    }
    let mut sum = 0.0;
    let mut n_unmasked = 0usize;
    for t in (0..n).filter(|&t| b.mask[t] != 0) {
        let rho = (b.logp_new[t] - b.logp_old[t]).exp();
        sum += clipped_term(rho, b.advantage, b.clip_eps) - b.kl_beta * k3(b.logp_ref[t], b.logp_new[t]);
        n_unmasked += 1;
    }
    if n_unmasked == 0 {
        return Err(GrpoError::AllMasked);
    }
    Ok(sum / n_unmasked as f64)
}

/// One line of a training batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchRecord {
    pub trajectory_id: String,
    pub group_id: String,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    pub n_tokens: usize,
    pub spans: Vec<TokenSpan>,
    pub mask: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_new: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_old: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_ref: Option<Vec<f64>>,
}

impl BatchRecord {
    /// The surrogate inputs, once a trainer has filled in all three log-prob streams.
    pub fn token_batch(&self, clip_eps: f64, kl_beta: f64) -> Option<TokenBatch> {
        Some(TokenBatch {
            logp_new: self.logp_new.clone()?,
            logp_old: self.logp_old.clone()?,
            logp_ref: self.logp_ref.clone()?,
            mask: self.mask.clone(),
            advantage: self.advantage,
            clip_eps,
            kl_beta,
        })
    }
}

/// Records for one group of trajectories rolled out from the same input.
pub fn emit_training_batch(group: &[RewardedTrajectory], maps: &[SpanMap]) -> Result<Vec<BatchRecord>, GrpoError> {
    if maps.len() != group.len() {
        return Err(GrpoError::LengthMismatch(format!(
            "{} trajectories but {} span maps",
            group.len(),
            maps.len()
        )));
    }
    let rewards: Vec<f64> = group.iter().map(|r| r.reward.total).collect();
    let adv = group_advantages(&rewards)?;
    group
        .iter()
        .zip(maps)
        .zip(adv.advantages)
        .map(|((r, map), advantage)| {
            Ok(BatchRecord {
                trajectory_id: r.trajectory.id.clone(),
                group_id: group_of(&r.trajectory.id).to_string(),
                reward: r.reward,
                advantage,
                n_tokens: map.n_tokens,
                spans: map.spans.clone(),
                mask: mask_trajectory(&r.trajectory, map)?,
                logp_new: None,
                logp_old: None,
                logp_ref: None,
            })
        })
        .collect()
}

/// Splits trajectories into groups by id prefix, in order of first appearance.
pub fn group_trajectories(trajs: &[RewardedTrajectory]) -> Vec<Vec<RewardedTrajectory>> {
    let mut order: Vec<Vec<RewardedTrajectory>> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for t in trajs {
        let g = group_of(&t.trajectory.id);
        let i = *index.entry(g).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[i].push(t.clone());
    }
    order
}

/// Batch records for every group, with word-count span maps.
pub fn emit_all(exec: Exec, trajs: &[RewardedTrajectory]) -> Result<Vec<BatchRecord>, GrpoError> {
    let groups = group_trajectories(trajs);
    let per_group = exec.try_map(&groups, |g| {
        let maps: Vec<SpanMap> = g.iter().map(|r| SpanMap::words(&r.trajectory)).collect();
        emit_training_batch(g, &maps)
    })?;
    Ok(per_group.into_iter().flatten().collect())
}

pub fn write_batch(path: impl AsRef<Path>, records: &[BatchRecord]) -> Result<(), JsonlError> {
    jsonl::write(path, records)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<BatchRecord>, JsonlError> {
    jsonl::read(path)
}
