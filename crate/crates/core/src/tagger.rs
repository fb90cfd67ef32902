//! Difficulty-aware search tags from N forward samples.
//!
//! For each gold entity, `hit_text` counts samples containing a prediction
//! with the same span and type, and `hit_region` counts samples containing a
//! prediction with the same span whose region is correct (max IoU over the
//! gold boxes above the threshold, or both sides ungroundable). The region hit
//! ignores the type. Tags then follow:
//!
//! * `hit_text == 0` gives `TEXT_SEARCH`, `hit_region == 0` gives `IMAGE_SEARCH`
//!   (both can apply);
//! * otherwise both equal to N gives `NO_SEARCH`;
//! * anything else is `ADAPTIVE`.
//!
//! A sample joins the cold-start pool when any of its entities is tagged
//! search or `NO_SEARCH`, and the RL pool when any is `ADAPTIVE`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::exec::{seed_for_key, Exec};
use crate::metrics::{region_correct, spans_equal, GoldEntity, GoldSample, PredEntity};
use crate::policy::{Policy, PolicyError};
use crate::protocol::{parse_segment, Action, AnswerPayload};
use crate::rollout::{PostInput, PromptTemplate};

/// Default difficulty level.
pub const DEFAULT_N_SAMPLES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaggerError {
    #[error("at least one sample is required")]
    EmptySamples,
    #[error("iou threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("sample {sample_id}: {source}")]
    Policy {
        sample_id: String,
        #[source]
        source: PolicyError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounts {
    pub hit_text: usize,
    pub hit_region: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SearchTag {
    TextSearch,
    ImageSearch,
    NoSearch,
    Adaptive,
}

impl SearchTag {
    pub fn is_search(self) -> bool {
        matches!(self, SearchTag::TextSearch | SearchTag::ImageSearch)
    }

    pub fn label(self) -> &'static str {
        match self {
            SearchTag::TextSearch => "TEXT_SEARCH",
            SearchTag::ImageSearch => "IMAGE_SEARCH",
            SearchTag::NoSearch => "NO_SEARCH",
            SearchTag::Adaptive => "ADAPTIVE",
        }
    }
}

pub fn hit_counts(gold: &GoldEntity, samples: &[Vec<PredEntity>], iou_threshold: f64) -> Result<HitCounts, TaggerError> {
    if samples.is_empty() {
        return Err(TaggerError::EmptySamples);
    }
    let mut c = HitCounts {
        hit_text: 0,
        hit_region: 0,
        n: samples.len(),
    };
    for preds in samples {
        let same_span = || preds.iter().filter(|p| spans_equal(&p.span, &gold.span));
        if same_span().any(|p| p.type_label == gold.type_label) {
            c.hit_text += 1;
        }
        if same_span().any(|p| region_correct(p.region.as_ref(), &gold.boxes, iou_threshold)) {
            c.hit_region += 1;
        }
    }
    Ok(c)
}

/// Tags in canonical order; never empty.
pub fn assign_tag(c: HitCounts) -> Vec<SearchTag> {
    let mut tags = Vec::with_capacity(2);
    if c.hit_text == 0 {
        tags.push(SearchTag::TextSearch);
    }
    if c.hit_region == 0 {
        tags.push(SearchTag::ImageSearch);
    }
    if tags.is_empty() {
        tags.push(if c.hit_text == c.n && c.hit_region == c.n {
            SearchTag::NoSearch
        } else {
            SearchTag::Adaptive
        });
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTagReport {
    pub sample_id: String,
    pub entity: GoldEntity,
    pub counts: HitCounts,
    pub tags: Vec<SearchTag>,
}

/// One line of a pool manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Union of the sample's entity tags.
    pub tags: BTreeSet<SearchTag>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TagOutput {
    pub reports: Vec<SearchTagReport>,
    pub cold_start: Vec<ManifestEntry>,
    pub rl_pool: Vec<ManifestEntry>,
}

/// Reads predictions from one forward sample: an answer segment, or a bare
/// answer JSON object. Anything else predicts nothing.
pub fn sample_predictions(text: &str) -> Vec<PredEntity> {
    if let Ok(seg) = parse_segment(text) {
        return match seg.action() {
            Action::Answer(a) => a.entities.clone(),
            Action::Search(_) => Vec::new(),
        };
    }
    serde_json::from_str::<AnswerPayload>(text.trim())
        .map(|a| a.entities)
        .unwrap_or_default()
}

fn manifests(reports: &[SearchTagReport], order: &[&str]) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let mut by_id: HashMap<&str, BTreeSet<SearchTag>> = HashMap::new();
    for r in reports {
        by_id.entry(r.sample_id.as_str()).or_default().extend(r.tags.iter().copied());
    }
    let (mut cold, mut rl) = (Vec::new(), Vec::new());
    for id in order {
        let Some(tags) = by_id.remove(id) else { continue };
        let entry = ManifestEntry { id: id.to_string(), tags };
        let adaptive = entry.tags.contains(&SearchTag::Adaptive);
        if entry.tags.iter().any(|t| *t != SearchTag::Adaptive) {
            cold.push(entry.clone());
        }
        if adaptive {
            rl.push(entry);
        }
    }
    (cold, rl)
}

/// Samples `n` answers per post and tags every gold entity.
pub struct TagRun<'a> {
    pub policy: &'a dyn Policy,
    pub template: &'a PromptTemplate,
    pub instruction: &'a str,
    pub n: usize,
    pub seed: u64,
    pub iou_threshold: f64,
}

impl TagRun<'_> {
    pub fn sample(&self, s: &GoldSample) -> Result<Vec<Vec<PredEntity>>, TaggerError> {
        let prompt = self.template.render(&PostInput::from(s), self.instruction);
        let texts = self
            .policy
            .sample_n(&s.id, &prompt, self.n, seed_for_key(self.seed, &s.id))
            .map_err(|source| TaggerError::Policy {
                sample_id: s.id.clone(),
                source,
            })?;
        Ok(texts.iter().map(|t| sample_predictions(t)).collect())
    }

    pub fn run(&self, exec: Exec, corpus: &[GoldSample]) -> Result<TagOutput, TaggerError> {
        if self.n == 0 {
            return Err(TaggerError::EmptySamples);
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(TaggerError::InvalidThreshold(self.iou_threshold));
        }
        let per_sample = exec.try_map(corpus, |s| {
            let samples = self.sample(s)?;
            s.entities
                .iter()
                .map(|e| {
                    let counts = hit_counts(e, &samples, self.iou_threshold)?;
                    Ok(SearchTagReport {
                        sample_id: s.id.clone(),
                        entity: e.clone(),
                        counts,
                        tags: assign_tag(counts),
                    })
                })
                .collect::<Result<Vec<_>, TaggerError>>()
        })?;
        let reports: Vec<SearchTagReport> = per_sample.into_iter().flatten().collect();
        let order: Vec<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
        let (cold_start, rl_pool) = manifests(&reports, &order);
        Ok(TagOutput {
            reports,
            cold_start,
            rl_pool,
        })
    }
}
