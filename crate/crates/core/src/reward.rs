//! Trajectory reward: answer F1, format compliance and a gated search penalty.
//!
//! ```text
//! total = λ_F1·r_F1 + λ_fmt·r_fmt − λ_search·1[r_F1 ≥ γ]·n_search
//! ```
//!
//! `r_F1` is the GMNER F1 of the final answer against gold (0 without an
//! answer), `r_fmt` is 1 when every segment parsed and an answer was given,
//! and `n_search` is the number of tool calls divided by `max(1, |gold|)`.

use serde::{Deserialize, Serialize};

use crate::metrics::{score, GoldEntity, Task};
use crate::rollout::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_f1: f64,
    pub lambda_fmt: f64,
    pub lambda_search: f64,
    pub gamma: f64,
}

/// Gate used on the fine-grained variant of the benchmark.
pub const GAMMA_FINE_GRAINED: f64 = 0.6;

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_f1: 0.9,
            lambda_fmt: 0.1,
            lambda_search: 0.01,
            gamma: 0.8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_f1", self.lambda_f1),
            ("lambda_fmt", self.lambda_fmt),
            ("lambda_search", self.lambda_search),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !self.gamma.is_finite() {
            return Err(format!("gamma must be finite, got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f1: f64,
    pub r_fmt: f64,
    pub n_search: f64,
    pub penalty_active: bool,
    pub total: f64,
}

/// Combines already computed components.
pub fn combine(r_f1: f64, format_ok: bool, n_search: f64, cfg: &RewardConfig) -> RewardBreakdown {
    let r_fmt = if format_ok { 1.0 } else { 0.0 };
    let penalty_active = r_f1 >= cfg.gamma;
    let mut total = cfg.lambda_f1 * r_f1 + cfg.lambda_fmt * r_fmt;
    if penalty_active {
        total -= cfg.lambda_search * n_search;
    }
    RewardBreakdown {
        r_f1,
        r_fmt,
        n_search,
        penalty_active,
        total,
    }
}

pub fn search_per_entity(n_tool_calls: usize, n_gold: usize) -> f64 {
    n_tool_calls as f64 / n_gold.max(1) as f64
}

pub fn compute_reward(traj: &Trajectory, gold: &[GoldEntity], cfg: &RewardConfig) -> RewardBreakdown {
    let r_f1 = match &traj.final_answer {
        Some(a) => score(&a.entities, gold, Task::Gmner).f1,
        None => 0.0,
    };
    combine(r_f1, traj.format_ok(), search_per_entity(traj.n_tool_calls, gold.len()), cfg)
}

/// A trajectory line with its reward attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedTrajectory {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown,
}
