//! Strict GMNER / MNER / EEG evaluation.
//!
//! A predicted triplet is correct against a gold triplet when the indicators
//! required by the task all hold:
//!
//! * `C_e`: spans are equal after trimming outer whitespace (case preserved),
//! * `C_t`: type labels are equal,
//! * `C_r`: both sides are ungroundable, or the predicted box has IoU strictly
//!   greater than 0.5 with at least one gold box.
//!
//! GMNER needs all three, MNER needs `C_e ∧ C_t`, EEG needs `C_e ∧ C_r`.
//! Within one sample each gold triplet can be consumed by at most one
//! prediction; counts come from a maximum one-to-one matching.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;

/// IoU a predicted box must strictly exceed to ground an entity.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid box {0:?}: need finite coordinates >= 0 with x1 < x2 and y1 < y2")]
    InvalidBox([f64; 4]),
    #[error("train corpus is missing or empty; seen/unseen split needs it")]
    MissingTrainCorpus,
    #[error("unknown task {0:?} (expected gmner, mner or eeg)")]
    UnknownTask(String),
}

/// Axis-aligned box in pixel coordinates, `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, MetricsError> {
        let c = [x1, y1, x2, y2];
        if c.iter().all(|v| v.is_finite() && *v >= 0.0) && x1 < x2 && y1 < y2 {
            Ok(BBox { x1, y1, x2, y2 })
        } else {
            Err(MetricsError::InvalidBox(c))
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = MetricsError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union of two valid boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A predicted triplet. At most one box per predicted entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredEntity {
    pub span: String,
    #[serde(rename = "type")]
    pub type_label: String,
    #[serde(rename = "box")]
    pub region: Option<BBox>,
}

impl PredEntity {
    pub fn new(span: impl Into<String>, type_label: impl Into<String>, region: Option<BBox>) -> Self {
        PredEntity {
            span: span.into(),
            type_label: type_label.into(),
            region,
        }
    }
}

/// A gold triplet. An empty box list means the entity is not groundable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEntity {
    pub span: String,
    #[serde(rename = "type")]
    pub type_label: String,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

impl GoldEntity {
    pub fn new(span: impl Into<String>, type_label: impl Into<String>, boxes: Vec<BBox>) -> Self {
        GoldEntity {
            span: span.into(),
            type_label: type_label.into(),
            boxes,
        }
    }

    pub fn groundable(&self) -> bool {
        !self.boxes.is_empty()
    }
}

/// One annotated post: the gold corpus record shared by tagging, rollouts and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSample {
    pub id: String,
    pub text: String,
    pub image_ref: String,
    #[serde(default)]
    pub entities: Vec<GoldEntity>,
}

/// A prediction record: the answer schema plus the sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub entities: Vec<PredEntity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gmner,
    Mner,
    Eeg,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Gmner, Task::Mner, Task::Eeg];

    pub fn label(self) -> &'static str {
        match self {
            Task::Gmner => "GMNER",
            Task::Mner => "MNER",
            Task::Eeg => "EEG",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Task {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gmner" => Ok(Task::Gmner),
            "mner" => Ok(Task::Mner),
            "eeg" => Ok(Task::Eeg),
            _ => Err(MetricsError::UnknownTask(s.to_string())),
        }
    }
}

pub fn spans_equal(a: &str, b: &str) -> bool {
    a.trim() == b.trim()
}

/// `C_r` against an arbitrary IoU threshold.
pub fn region_correct(pred: Option<&BBox>, gold_boxes: &[BBox], threshold: f64) -> bool {
    match pred {
        None => gold_boxes.is_empty(),
        Some(p) => gold_boxes.iter().map(|g| iou(p, g)).fold(f64::NEG_INFINITY, f64::max) > threshold,
    }
}

pub fn triplet_correct(pred: &PredEntity, gold: &GoldEntity, task: Task) -> bool {
    if !spans_equal(&pred.span, &gold.span) {
        return false;
    }
    let c_t = || pred.type_label == gold.type_label;
    let c_r = || region_correct(pred.region.as_ref(), &gold.boxes, IOU_THRESHOLD);
    match task {
        Task::Gmner => c_t() && c_r(),
        Task::Mner => c_t(),
        Task::Eeg => c_r(),
    }
}

/// Size of a maximum one-to-one matching between predictions and golds under
/// the task's correctness relation (augmenting paths).
pub fn match_count(preds: &[PredEntity], golds: &[GoldEntity], task: Task) -> usize {
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            golds
                .iter()
                .enumerate()
                .filter(|(_, g)| triplet_correct(p, g, task))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut owner = vec![None; golds.len()];
    let mut matched = 0;
    for u in 0..preds.len() {
        let mut seen = vec![false; golds.len()];
        if augment(u, &adj, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    matched
}

/// Raw counts; additive across samples (micro-averaging).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounts {
    pub n_correct: usize,
    pub n_predict: usize,
    pub n_gold: usize,
}

impl Add for ScoreCounts {
    type Output = ScoreCounts;

    fn add(self, o: ScoreCounts) -> ScoreCounts {
        ScoreCounts {
            n_correct: self.n_correct + o.n_correct,
            n_predict: self.n_predict + o.n_predict,
            n_gold: self.n_gold + o.n_gold,
        }
    }
}

impl AddAssign for ScoreCounts {
    fn add_assign(&mut self, o: ScoreCounts) {
        *self = *self + o;
    }
}

impl ScoreCounts {
    pub fn of(preds: &[PredEntity], golds: &[GoldEntity], task: Task) -> Self {
        ScoreCounts {
            n_correct: match_count(preds, golds, task),
            n_predict: preds.len(),
            n_gold: golds.len(),
        }
    }

    pub fn report(self, task: Task) -> ScoreReport {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.n_correct, self.n_predict);
        let recall = ratio(self.n_correct, self.n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ScoreReport {
            task,
            precision,
            recall,
            f1,
            n_correct: self.n_correct,
            n_predict: self.n_predict,
            n_gold: self.n_gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: Task,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_correct: usize,
    pub n_predict: usize,
    pub n_gold: usize,
}

impl ScoreReport {
    pub fn counts(&self) -> ScoreCounts {
        ScoreCounts {
            n_correct: self.n_correct,
            n_predict: self.n_predict,
            n_gold: self.n_gold,
        }
    }
}

/// Scores a single sample.
pub fn score(preds: &[PredEntity], golds: &[GoldEntity], task: Task) -> ScoreReport {
    ScoreCounts::of(preds, golds, task).report(task)
}

/// One sample's predictions and gold, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub preds: &'a [PredEntity],
    pub golds: &'a [GoldEntity],
    /// Tool calls the trajectory made, when the predictions came from rollouts.
    pub n_tool_calls: Option<usize>,
}

/// Micro-averaged score over many samples; matching never crosses sample boundaries.
pub fn score_corpus(exec: Exec, samples: &[EvalSample<'_>], task: Task) -> ScoreReport {
    exec.map(samples, |s| ScoreCounts::of(s.preds, s.golds, task))
        .into_iter()
        .fold(ScoreCounts::default(), Add::add)
        .report(task)
}

/// Fraction of trajectories that called at least one tool.
pub fn search_ratio(tool_calls: impl IntoIterator<Item = usize>) -> f64 {
    let (mut n, mut searched) = (0usize, 0usize);
    for c in tool_calls {
        n += 1;
        if c > 0 {
            searched += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        searched as f64 / n as f64
    }
}

/// Which gold attributes make a test sample "unseen".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenCriterion {
    /// A gold mention never appears in the train corpus.
    #[default]
    Mention,
    /// A gold (mention, type) pair never appears in the train corpus.
    MentionType,
    /// A gold (mention, groundable) pair never appears in the train corpus.
    MentionGrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub gmner: ScoreReport,
    pub mner: ScoreReport,
    pub eeg: ScoreReport,
}

impl TaskScores {
    pub fn compute(exec: Exec, samples: &[EvalSample<'_>]) -> Self {
        let counts = exec.map(samples, |s| {
            Task::ALL.map(|t| ScoreCounts::of(s.preds, s.golds, t))
        });
        let mut tot = [ScoreCounts::default(); 3];
        for c in counts {
            for i in 0..3 {
                tot[i] += c[i];
            }
        }
        TaskScores {
            gmner: tot[0].report(Task::Gmner),
            mner: tot[1].report(Task::Mner),
            eeg: tot[2].report(Task::Eeg),
        }
    }

    pub fn get(&self, task: Task) -> &ScoreReport {
        match task {
            Task::Gmner => &self.gmner,
            Task::Mner => &self.mner,
            Task::Eeg => &self.eeg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub n_samples: usize,
    pub scores: TaskScores,
    pub search_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub seen: SplitScores,
    pub unseen: SplitScores,
    pub all: SplitScores,
}

fn split_scores(exec: Exec, samples: &[EvalSample<'_>]) -> SplitScores {
    let search_ratio = if !samples.is_empty() && samples.iter().all(|s| s.n_tool_calls.is_some()) {
        Some(search_ratio(samples.iter().filter_map(|s| s.n_tool_calls)))
    } else {
        None
    };
    SplitScores {
        n_samples: samples.len(),
        scores: TaskScores::compute(exec, samples),
        search_ratio,
    }
}

/// Whether any gold entity of a test sample is absent from the train corpus.
pub fn is_unseen(golds: &[GoldEntity], train: &[GoldSample], criterion: UnseenCriterion) -> bool {
    let key = |g: &GoldEntity| -> (String, String) {
        let m = g.span.trim().to_string();
        match criterion {
            UnseenCriterion::Mention => (m, String::new()),
            UnseenCriterion::MentionType => (m, g.type_label.clone()),
            UnseenCriterion::MentionGrounding => (m, g.groundable().to_string()),
        }
    };
    let known: HashSet<(String, String)> = train.iter().flat_map(|s| s.entities.iter().map(key)).collect();
    golds.iter().any(|g| !known.contains(&key(g)))
}

pub fn seen_unseen_split(
    exec: Exec,
    samples: &[EvalSample<'_>],
    train: &[GoldSample],
    criterion: UnseenCriterion,
) -> Result<SplitReport, MetricsError> {
    if train.is_empty() {
        return Err(MetricsError::MissingTrainCorpus);
    }
    let (unseen, seen): (Vec<EvalSample<'_>>, Vec<EvalSample<'_>>) =
        samples.iter().partition(|s| is_unseen(s.golds, train, criterion));
    Ok(SplitReport {
        seen: split_scores(exec, &seen),
        unseen: split_scores(exec, &unseen),
        all: split_scores(exec, samples),
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

const COLUMNS: [&str; 11] = [
    "Split", "N", "GMNER Pre.", "GMNER Rec.", "GMNER F1", "MNER Pre.", "MNER Rec.", "MNER F1",
    "EEG Pre.", "EEG Rec.", "EEG F1",
];

fn rows(named: &[(&str, &SplitScores)]) -> Vec<Vec<String>> {
    named
        .iter()
        .map(|(name, s)| {
            let mut row = vec![name.to_string(), s.n_samples.to_string()];
            for t in Task::ALL {
                let r = s.scores.get(t);
                row.extend([pct(r.precision), pct(r.recall), pct(r.f1)]);
            }
            row.push(s.search_ratio.map(pct).unwrap_or_else(|| "-".into()));
            row
        })
        .collect()
}

/// Markdown table with Pre./Rec./F1 per task and the search ratio (percent).
pub fn markdown_table(named: &[(&str, &SplitScores)]) -> String {
    let mut header: Vec<&str> = COLUMNS.to_vec();
    header.push("SR");
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in rows(named) {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

pub fn csv_table(named: &[(&str, &SplitScores)]) -> String {
    let mut header: Vec<&str> = COLUMNS.to_vec();
    header.push("SR");
    let mut out = header.join(",");
    out.push('\n');
    for row in rows(named) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
