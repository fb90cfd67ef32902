//! A toy learner for the search-penalty ablation.
//!
//! Each post has one logit `θ`: on turn 0 the learner searches with
//! probability `σ(θ)`, otherwise it answers from memory, getting an entity's
//! type right with probability `text_level / 4` and its region right with
//! probability `region_level / 4`. After a search every entity is right with
//! probability `post_search_accuracy`. Episodes go through the real rollout
//! loop, gateway, reward and group advantages; the logit then takes a
//! REINFORCE step `θ += lr · mean(Â_i · (a_i − σ(θ)))`.
//!
//! Random draws are keyed by (seed, epoch, post, member) and consumed in the
//! same order whatever the decision, so two configurations run with common
//! random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SynthPost, World, PROBE_SAMPLES};
use crate::exec::{derive_seed, Exec};
use crate::grpo::{group_advantages, GrpoError};
use crate::metrics::search_ratio;
use crate::policy::{word_count, GenerateRequest, Generation, Policy, PolicyError};
use crate::protocol::{answer_json, search_json, AnswerPayload, SearchQuery};
use crate::reward::{compute_reward, RewardConfig};
use crate::rollout::{group_of, run_group, PostInput, PromptTemplate, RolloutConfig, RolloutError};
use crate::toolgw::{Gateway, LocalIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub epochs: usize,
    pub group_size: usize,
    pub lr: f64,
    pub init_search_prob: f64,
    pub post_search_accuracy: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            epochs: 40,
            group_size: 8,
            lr: 2.0,
            init_search_prob: 0.8,
            post_search_accuracy: 1.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    /// Observed search ratio per epoch.
    pub ratios: Vec<f64>,
    /// Mean search probability after training.
    pub final_search_prob: f64,
}

impl AblationRun {
    /// Observed search ratio averaged over the last `k` epochs.
    pub fn tail_ratio(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.ratios.len().max(1));
        let tail = &self.ratios[self.ratios.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct Learner<'a> {
    world: &'a World,
    thetas: &'a [f64],
    post_search_accuracy: f64,
}

impl Learner<'_> {
    fn answer(&self, post: &SynthPost, rng: &mut ChaCha8Rng, after_search: bool) -> String {
        let entities = post
            .entities
            .iter()
            .map(|e| {
                let (t, r): (f64, f64) = (rng.random(), rng.random());
                if after_search {
                    let ok = t < self.post_search_accuracy;
                    e.wrong(ok, ok)
                } else {
                    let n = PROBE_SAMPLES as f64;
                    e.wrong(t < e.text_level as f64 / n, r < e.region_level as f64 / n)
                }
            })
            .collect();
        format!(
            "<reason>Answering.</reason>\n<answer>{}</answer>",
            answer_json(&AnswerPayload { entities })
        )
    }
}

impl Policy for Learner<'_> {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Generation, PolicyError> {
        let group = group_of(req.trajectory_id);
        let (idx, post) = self
            .world
            .posts
            .iter()
            .enumerate()
            .find(|(_, p)| p.id == group)
            .ok_or_else(|| PolicyError::FixtureExhausted {
                trajectory_id: req.trajectory_id.to_string(),
                turn_index: req.turn_index,
            })?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, req.turn_index as u64));
        let text = if req.turn_index == 0 {
            let u: f64 = rng.random();
            let direct = self.answer(post, &mut rng, false);
            if u < sigmoid(self.thetas[idx]) {
                let queries: Vec<SearchQuery> =
                    post.entities.iter().map(|e| SearchQuery::new(e.span.clone(), e.span.clone())).collect();
                format!("<reason>Searching.</reason>\n<text_search>{}</text_search>", search_json(&queries))
            } else {
                direct
            }
        } else {
            self.answer(post, &mut rng, true)
        };
        let token_count = word_count(&text);
        Ok(Generation { text, token_count })
    }
}

/// Trains the per-post search logits under `reward` and reports the search ratio.
pub fn train(
    world: &World,
    reward: &RewardConfig,
    cfg: &AblationConfig,
    seed: u64,
    exec: Exec,
) -> Result<AblationRun, AblationError> {
    let tools = Gateway::local(LocalIndex::new(world.index_docs()));
    let rollout = RolloutConfig::default();
    let template = PromptTemplate::default();
    let corpus = world.corpus();
    let inputs: Vec<PostInput> = corpus.iter().map(PostInput::from).collect();
    let prompts: Vec<String> = inputs.iter().map(|i| template.render(i, "")).collect();
    let mut thetas = vec![logit(cfg.init_search_prob); world.posts.len()];
    let mut ratios = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(seed, epoch as u64);
        let learner = Learner {
            world,
            thetas: &thetas,
            post_search_accuracy: cfg.post_search_accuracy,
        };
        let groups = exec.try_map(&(0..world.posts.len()).collect::<Vec<_>>(), |&i| {
            run_group(
                &inputs[i],
                &prompts[i],
                &learner,
                &tools,
                &rollout,
                cfg.group_size,
                derive_seed(epoch_seed, i as u64),
                Exec::Sequential,
            )
        })?;
        let mut calls = Vec::new();
        let mut next = thetas.clone();
        for (i, group) in groups.iter().enumerate() {
            let rewards: Vec<f64> =
                group.iter().map(|t| compute_reward(t, &corpus[i].entities, reward).total).collect();
            let adv = group_advantages(&rewards)?;
            let p = sigmoid(thetas[i]);
            let grad = group
                .iter()
                .zip(&adv.advantages)
                .map(|(t, a)| a * (if t.n_tool_calls > 0 { 1.0 } else { 0.0 } - p))
                .sum::<f64>()
                / group.len() as f64;
            next[i] += cfg.lr * grad;
            calls.extend(group.iter().map(|t| t.n_tool_calls));
        }
        thetas = next;
        ratios.push(search_ratio(calls));
    }
    let final_search_prob = thetas.iter().map(|t| sigmoid(*t)).sum::<f64>() / thetas.len() as f64;
    Ok(AblationRun {
        ratios,
        final_search_prob,
    })
}
