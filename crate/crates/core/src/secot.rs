//! Tag-conditioned cold-start trajectories.
//!
//! Samples carrying a search or `NO_SEARCH` tag are rolled out with a teacher
//! policy under an instruction spelling out, per entity, whether to search and
//! with which tool. Each record is then checked by fixed rules, in order:
//!
//! 1. the teacher and tools answered (`infrastructure`);
//! 2. at most [`MAX_TURNS`] turns and no budget exhaustion (`turn_budget`);
//! 3. every segment parsed and a final answer exists (`format`);
//! 4. every `TEXT_SEARCH` / `IMAGE_SEARCH` entity has a query of that modality
//!    naming it, and no `NO_SEARCH` entity is searched (`tag_coverage`);
//! 5. every query contains the entity it names, and every answered span is
//!    mentioned in a reason, an observation or the gold (`inconsistent`);
//! 6. the answer scores GMNER F1 = 1 against gold (`erroneous_prediction`).
//!
//! An optional [`Judge`] runs after the rules. Records keep a per-region loss
//! mask that trains only on teacher-generated text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::{derive_seed, seed_for_key, Exec};
use crate::metrics::{score, spans_equal, GoldEntity, GoldSample, Task};
use crate::policy::{Policy, ReplayPolicy};
use crate::protocol::{Action, Modality};
use crate::rollout::{
    run_rollout, PostInput, PromptTemplate, Region, RegionKind, RolloutConfig, RolloutRequest, Trajectory,
    TrajectoryStatus,
};
use crate::tagger::{SearchTag, SearchTagReport};
use crate::toolgw::{normalize_query, Tools};

/// Dialogue turns allowed in a cold-start record.
pub const MAX_TURNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTags {
    pub entity: GoldEntity,
    pub tags: Vec<SearchTag>,
}

/// A sample selected for synthesis with the tags of its entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub sample_id: String,
    pub entities: Vec<EntityTags>,
}

impl TaggedSample {
    /// Entities carrying `tag`.
    pub fn tagged(&self, tag: SearchTag) -> impl Iterator<Item = &GoldEntity> {
        self.entities
            .iter()
            .filter(move |e| e.tags.contains(&tag))
            .map(|e| &e.entity)
    }
}

/// Samples with at least one non-`ADAPTIVE` entity tag, in report order.
pub fn filter_pool(reports: &[SearchTagReport]) -> Vec<TaggedSample> {
    let mut order: Vec<TaggedSample> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in reports {
        let i = *index.entry(r.sample_id.as_str()).or_insert_with(|| {
            order.push(TaggedSample {
                sample_id: r.sample_id.clone(),
                entities: Vec::new(),
            });
            order.len() - 1
        });
        order[i].entities.push(EntityTags {
            entity: r.entity.clone(),
            tags: r.tags.clone(),
        });
    }
    order.retain(|s| s.entities.iter().any(|e| e.tags.iter().any(|t| *t != SearchTag::Adaptive)));
    order
}

/// Per-entity guidance placed in the teacher prompt.
pub fn tag_instruction(sample: &TaggedSample) -> String {
    let mut out = String::new();
    for e in &sample.entities {
        let span = &e.entity.span;
        let text = e.tags.contains(&SearchTag::TextSearch);
        let image = e.tags.contains(&SearchTag::ImageSearch);
        let line = match (text, image) {
            (true, true) => format!(
                "\"{span}\": I am not sure, I need to search both the text and the image for this entity."
            ),
            (true, false) => format!("\"{span}\": I am not sure what this entity is, I need to search the text."),
            (false, true) => format!("\"{span}\": I am not sure where this entity is, I need to search the image."),
            _ if e.tags.contains(&SearchTag::NoSearch) => {
                format!("\"{span}\": I know this entity and can answer without searching.")
            }
            _ => continue,
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    Infrastructure { detail: String },
    TurnBudget { turns: usize },
    Format,
    TagCoverage { entity: String, tag: SearchTag },
    Inconsistent { detail: String },
    ErroneousPrediction { f1: f64 },
    Judge { detail: String },
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Infrastructure { .. } => "infrastructure",
            RejectReason::TurnBudget { .. } => "turn_budget",
            RejectReason::Format => "format",
            RejectReason::TagCoverage { .. } => "tag_coverage",
            RejectReason::Inconsistent { .. } => "inconsistent",
            RejectReason::ErroneousPrediction { .. } => "erroneous_prediction",
            RejectReason::Judge { .. } => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Accepted,
    Rejected(RejectReason),
}

/// A region of the transcript and whether it is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossRegion {
    #[serde(flatten)]
    pub region: Region,
    pub train: bool,
}

pub fn loss_mask(traj: &Trajectory) -> Vec<LossRegion> {
    traj.regions()
        .into_iter()
        .map(|region| LossRegion {
            region,
            train: region.kind.supervised(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecotRecord {
    pub sample_id: String,
    pub input: PostInput,
    pub gold: Vec<GoldEntity>,
    pub entity_tags: Vec<EntityTags>,
    pub teacher: String,
    pub attempt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    pub verdict: Verdict,
    #[serde(default)]
    pub loss_mask: Vec<LossRegion>,
}

/// Optional model-based check run after the rules.
pub trait Judge: Send + Sync {
    /// `Err` carries the reason for rejection.
    fn judge(&self, record: &SecotRecord) -> Result<(), String>;
}

pub struct Synthesis<'a> {
    pub teacher: &'a dyn Policy,
    pub tools: &'a dyn Tools,
    pub rollout: RolloutConfig,
    pub template: &'a PromptTemplate,
    pub seed: u64,
}

impl Synthesis<'_> {
    pub fn prompt(&self, input: &PostInput, sample: &TaggedSample) -> String {
        self.template.render(input, &tag_instruction(sample))
    }

    /// Runs the teacher once. The verdict is `Pending` unless the rollout
    /// failed or ran past the turn budget.
    pub fn synthesize(&self, gold: &GoldSample, sample: &TaggedSample, attempt: usize) -> SecotRecord {
        let input = PostInput::from(gold);
        let prompt = self.prompt(&input, sample);
        let seed = derive_seed(seed_for_key(self.seed, &gold.id), attempt as u64);
        let result = run_rollout(
            RolloutRequest {
                trajectory_id: &gold.id,
                input: &input,
                prompt: &prompt,
                seed,
            },
            self.teacher,
            self.tools,
            &self.rollout,
        );
        let mut record = SecotRecord {
            sample_id: gold.id.clone(),
            input,
            gold: gold.entities.clone(),
            entity_tags: sample.entities.clone(),
            teacher: self.teacher.id(),
            attempt,
            trajectory: None,
            verdict: Verdict::Pending,
            loss_mask: Vec::new(),
        };
        match result {
            Ok(t) => {
                if let Some(r) = turn_budget(&t) {
                    record.verdict = Verdict::Rejected(r);
                }
                record.loss_mask = loss_mask(&t);
                record.trajectory = Some(t);
            }
            Err(e) => {
                record.verdict = Verdict::Rejected(RejectReason::Infrastructure { detail: e.to_string() });
            }
        }
        record
    }

    /// Synthesises and validates, retrying rejected samples up to `resample` times.
    pub fn build(
        &self,
        exec: Exec,
        corpus: &[GoldSample],
        pool: &[TaggedSample],
        resample: usize,
        judge: Option<&dyn Judge>,
    ) -> Vec<SecotRecord> {
        let by_id: HashMap<&str, &GoldSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
        let jobs: Vec<(&GoldSample, &TaggedSample)> = pool
            .iter()
            .filter_map(|t| by_id.get(t.sample_id.as_str()).map(|g| (*g, t)))
            .collect();
        exec.map(&jobs, |(gold, tagged)| {
            let mut attempt = 0;
            loop {
                let mut rec = self.synthesize(gold, tagged, attempt);
                rec.verdict = validate(&rec, judge);
                if rec.verdict == Verdict::Accepted || attempt >= resample {
                    return rec;
                }
                attempt += 1;
            }
        })
    }
}

fn turn_budget(t: &Trajectory) -> Option<RejectReason> {
    (t.turns.len() > MAX_TURNS || t.status == TrajectoryStatus::BudgetExhausted)
        .then_some(RejectReason::TurnBudget { turns: t.turns.len() })
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    normalize_query(haystack).contains(&normalize_query(needle))
}

fn check_coverage(t: &Trajectory, tags: &[EntityTags]) -> Result<(), RejectReason> {
    let searched = |m: Option<Modality>, span: &str| {
        t.search_queries()
            .any(|(qm, q)| m.is_none_or(|m| m == qm) && spans_equal(&q.entity, span))
    };
    for e in tags {
        let span = &e.entity.span;
        for tag in &e.tags {
            let ok = match tag {
                SearchTag::TextSearch => searched(Some(Modality::Text), span),
                SearchTag::ImageSearch => searched(Some(Modality::Image), span),
                SearchTag::NoSearch => !searched(None, span),
                SearchTag::Adaptive => true,
            };
            if !ok {
                return Err(RejectReason::TagCoverage {
                    entity: span.clone(),
                    tag: *tag,
                });
            }
        }
    }
    Ok(())
}

fn check_consistency(t: &Trajectory, gold: &[GoldEntity]) -> Result<(), RejectReason> {
    if let Some((_, q)) = t.search_queries().find(|(_, q)| !contains_ci(&q.q, &q.entity)) {
        return Err(RejectReason::Inconsistent {
            detail: format!("query {:?} does not name entity {:?}", q.q, q.entity),
        });
    }
    let Some(answer) = &t.final_answer else {
        return Ok(());
    };
    let reasons: Vec<&str> = t.turns.iter().filter_map(|x| x.segment()).map(|s| s.reason()).collect();
    let observations: Vec<&str> = t.turns.iter().filter_map(|x| x.observation()).map(|o| o.body.as_str()).collect();
    for p in &answer.entities {
        let evidenced = reasons.iter().chain(&observations).any(|s| contains_ci(s, &p.span))
            || gold.iter().any(|g| spans_equal(&g.span, &p.span));
        if !evidenced {
            return Err(RejectReason::Inconsistent {
                detail: format!("answer entity {:?} has no support", p.span),
            });
        }
    }
    Ok(())
}

/// Applies the rules, then the judge.
pub fn validate(record: &SecotRecord, judge: Option<&dyn Judge>) -> Verdict {
    if let Verdict::Rejected(RejectReason::Infrastructure { .. }) = &record.verdict {
        return record.verdict.clone();
    }
    let Some(t) = &record.trajectory else {
        return Verdict::Rejected(RejectReason::Infrastructure {
            detail: "no trajectory".into(),
        });
    };
    let rules = || -> Result<(), RejectReason> {
        if let Some(r) = turn_budget(t) {
            return Err(r);
        }
        if !t.format_ok() {
            return Err(RejectReason::Format);
        }
        check_coverage(t, &record.entity_tags)?;
        check_consistency(t, &record.gold)?;
        let preds = &t.final_answer.as_ref().expect("format_ok implies an answer").entities;
        let f1 = if preds.is_empty() && record.gold.is_empty() {
            1.0
        } else {
            score(preds, &record.gold, Task::Gmner).f1
        };
        if f1 < 1.0 {
            return Err(RejectReason::ErroneousPrediction { f1 });
        }
        Ok(())
    };
    if let Err(r) = rules() {
        return Verdict::Rejected(r);
    }
    match judge.map(|j| j.judge(record)) {
        Some(Err(detail)) => Verdict::Rejected(RejectReason::Judge { detail }),
        _ => Verdict::Accepted,
    }
}

/// Re-runs the record's turns through a replay policy and compares.
pub fn replays_identically(record: &SecotRecord, tools: &dyn Tools, cfg: &RolloutConfig) -> bool {
    let Some(t) = &record.trajectory else {
        return false;
    };
    let replay = ReplayPolicy::from_trajectories([t]);
    let again = run_rollout(
        RolloutRequest {
            trajectory_id: &t.id,
            input: &t.input,
            prompt: &t.prompt,
            seed: 0,
        },
        &replay,
        tools,
        cfg,
    );
    again.is_ok_and(|a| serde_json::to_string(&a).ok() == serde_json::to_string(t).ok())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SecotStats {
    pub n_records: usize,
    pub n_accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    /// Accepted records by number of turns.
    pub turns: BTreeMap<usize, usize>,
    /// Accepted records by number of tool calls.
    pub tool_calls: BTreeMap<usize, usize>,
    /// Entity tags over accepted records.
    pub tags: BTreeMap<String, usize>,
    /// Accepted records by the kinds of search they used.
    pub behaviours: BTreeMap<String, usize>,
}

fn behaviour(t: &Trajectory) -> &'static str {
    let (mut text, mut image) = (false, false);
    for s in t.turns.iter().filter_map(|x| x.segment()) {
        if let Action::Search(set) = s.action() {
            match set.modality {
                Modality::Text => text = true,
                Modality::Image => image = true,
            }
        }
    }
    match (text, image) {
        (false, false) => "no_search",
        (true, false) => "text_search",
        (false, true) => "image_search",
        (true, true) => "mixed_search",
    }
}

impl SecotStats {
    pub fn of(records: &[SecotRecord]) -> Self {
        let mut s = SecotStats {
            n_records: records.len(),
            ..Default::default()
        };
        for r in records {
            match (&r.verdict, &r.trajectory) {
                (Verdict::Accepted, Some(t)) => {
                    s.n_accepted += 1;
                    *s.turns.entry(t.turns.len()).or_default() += 1;
                    *s.tool_calls.entry(t.n_tool_calls).or_default() += 1;
                    *s.behaviours.entry(behaviour(t).into()).or_default() += 1;
                    for e in &r.entity_tags {
                        for tag in &e.tags {
                            *s.tags.entry(tag.label().into()).or_default() += 1;
                        }
                    }
                }
                (Verdict::Rejected(reason), _) => *s.rejected.entry(reason.code().into()).or_default() += 1,
                _ => {}
            }
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("# Cold-start trajectories\n\n");
        let _ = writeln!(out, "Accepted {} of {} records.\n", self.n_accepted, self.n_records);
        let mut table = |title: &str, rows: Vec<(String, usize)>| {
            let _ = writeln!(out, "## {title}\n\n| | Count |\n|---|---|");
            for (k, v) in rows {
                let _ = writeln!(out, "| {k} | {v} |");
            }
            out.push('\n');
        };
        table("Turns", self.turns.iter().map(|(k, v)| (k.to_string(), *v)).collect());
        table("Tool calls", self.tool_calls.iter().map(|(k, v)| (k.to_string(), *v)).collect());
        table("Search behaviour", self.behaviours.iter().map(|(k, v)| (k.clone(), *v)).collect());
        table("Entity tags", self.tags.iter().map(|(k, v)| (k.clone(), *v)).collect());
        table("Rejections", self.rejected.iter().map(|(k, v)| (k.clone(), *v)).collect());
        out
    }
}

/// Checks the invariants every accepted record must satisfy.
pub fn check_accepted(record: &SecotRecord) -> Result<(), String> {
    let t = record.trajectory.as_ref().ok_or("accepted record without trajectory")?;
    if t.turns.len() > MAX_TURNS {
        return Err(format!("{} turns", t.turns.len()));
    }
    if t.final_answer.is_none() {
        return Err("no final answer".into());
    }
    check_coverage(t, &record.entity_tags).map_err(|e| format!("{e:?}"))?;
    let supervised: Vec<RegionKind> = record.loss_mask.iter().filter(|r| r.train).map(|r| r.region.kind).collect();
    if supervised.iter().any(|k| *k != RegionKind::Generated) {
        return Err("loss mask trains on environment text".into());
    }
    Ok(())
}
