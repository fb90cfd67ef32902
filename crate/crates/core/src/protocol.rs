//! Tag grammar of the action space.
//!
//! A model turn is exactly one `<reason>…</reason>` block followed by exactly
//! one action block: `<text_search>`, `<image_search>` or `<answer>`. Search
//! payloads are `{"queries":[{"entity":str,"q":str}]}`; answer payloads are
//! `{"entities":[{"span":str,"type":str,"box":[x1,y1,x2,y2]|null}]}`.
//! Environment evidence is injected as `<information>…</information>`.
//!
//! Grammar is flat: a block may not contain another protocol tag, whitespace
//! between blocks is ignored, and any other text outside blocks is rejected.
//! Canonical payloads escape `<`, `>` and `&` as `\u003c`-style JSON escapes
//! so a payload can never contain a tag delimiter.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::PredEntity;

pub const REASON: &str = "reason";
pub const TEXT_SEARCH: &str = "text_search";
pub const IMAGE_SEARCH: &str = "image_search";
pub const ANSWER: &str = "answer";
pub const INFORMATION: &str = "information";

const TAG_NAMES: [&str; 5] = [REASON, TEXT_SEARCH, IMAGE_SEARCH, ANSWER, INFORMATION];

/// Closing tags that end a generated segment.
pub const STOP_TAGS: [&str; 3] = ["</text_search>", "</image_search>", "</answer>"];

/// Feedback appended to the history after an unparsable segment.
pub const INVALID_FEEDBACK: &str = "Invalid Action. Please retry.";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum ProtocolError {
    #[error("missing <reason> block before the action (byte {offset})")]
    MissingReason { offset: usize },
    #[error("more than one <reason> block (byte {offset})")]
    MultipleReasons { offset: usize },
    #[error("more than one action block (byte {offset})")]
    MultipleActions { offset: usize },
    #[error("no action block after the reason (byte {offset})")]
    NoAction { offset: usize },
    #[error("malformed payload at byte {offset}: {detail}")]
    MalformedPayload { offset: usize, detail: String },
    #[error("unbalanced or nested tags (byte {offset})")]
    UnbalancedTags { offset: usize },
    #[error("text outside of tag blocks (byte {offset})")]
    StrayContent { offset: usize },
    #[error("<{tag}> may not be generated by the policy (byte {offset})")]
    UnexpectedBlock { offset: usize, tag: String },
}

impl ProtocolError {
    pub fn offset(&self) -> usize {
        match self {
            ProtocolError::MissingReason { offset }
            | ProtocolError::MultipleReasons { offset }
            | ProtocolError::MultipleActions { offset }
            | ProtocolError::NoAction { offset }
            | ProtocolError::MalformedPayload { offset, .. }
            | ProtocolError::UnbalancedTags { offset }
            | ProtocolError::StrayContent { offset }
            | ProtocolError::UnexpectedBlock { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => TEXT_SEARCH,
            Modality::Image => IMAGE_SEARCH,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    TextSearch,
    ImageSearch,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchQuery {
    pub entity: String,
    pub q: String,
}

impl SearchQuery {
    pub fn new(entity: impl Into<String>, q: impl Into<String>) -> Self {
        SearchQuery {
            entity: entity.into(),
            q: q.into(),
        }
    }
}

/// A batch of queries for one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchQuerySet {
    pub modality: Modality,
    pub entries: Vec<SearchQuery>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerPayload {
    pub entities: Vec<PredEntity>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Search(SearchQuerySet),
    Answer(AnswerPayload),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Search(s) if s.modality == Modality::Text => ActionKind::TextSearch,
            Action::Search(_) => ActionKind::ImageSearch,
            Action::Answer(_) => ActionKind::Answer,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Action::Search(s) => s.modality.tag(),
            Action::Answer(_) => ANSWER,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchWire {
    queries: Vec<SearchQuery>,
}

/// One validated model turn. `raw` is the text it was parsed from.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnSegment {
    reason: String,
    action: Action,
    raw: String,
}

impl TurnSegment {
    /// Builds a segment in canonical form; fails if the parts would not parse back.
    pub fn new(reason: impl Into<String>, action: Action) -> Result<Self, ProtocolError> {
        let raw = render(&reason.into(), &action);
        parse_segment(&raw)
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }

    pub fn action(&self) -> &Action {
        &self.action
    }

    pub fn kind(&self) -> ActionKind {
        self.action.kind()
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }
}

/// Environment evidence injected after a search turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub body: String,
    pub modality: Modality,
    /// Image references shown alongside the text, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl Observation {
    /// Wraps `body`, neutralising anything that would read as a protocol tag.
    pub fn new(body: impl Into<String>, modality: Modality) -> Self {
        Observation {
            body: neutralise_tags(&body.into()),
            modality,
            images: Vec::new(),
        }
    }

    pub fn with_images(mut self, images: Vec<String>) -> Self {
        self.images = images;
        self
    }

    pub fn to_tagged(&self) -> String {
        format!("<{INFORMATION}>{}</{INFORMATION}>", self.body)
    }
}

fn neutralise_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        let rest = &s[i..];
        if rest.starts_with('<') && match_tag(rest).is_some() {
            out.push_str("&lt;");
            i += 1;
        } else {
            let ch = rest.chars().next().expect("non-empty");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

/// Escapes characters that could form tag delimiters inside compact JSON.
/// Compact JSON only has these characters inside string literals.
fn escape_json(s: &str) -> String {
    s.replace('&', "\\u0026").replace('<', "\\u003c").replace('>', "\\u003e")
}

pub fn answer_json(payload: &AnswerPayload) -> String {
    escape_json(&serde_json::to_string(payload).expect("answer payload serialises"))
}

pub fn search_json(entries: &[SearchQuery]) -> String {
    let wire = SearchWire {
        queries: entries.to_vec(),
    };
    escape_json(&serde_json::to_string(&wire).expect("search payload serialises"))
}

fn render(reason: &str, action: &Action) -> String {
    let payload = match action {
        Action::Search(s) => search_json(&s.entries),
        Action::Answer(a) => answer_json(a),
    };
    let tag = action.tag();
    format!("<{REASON}>{reason}</{REASON}>\n<{tag}>{payload}</{tag}>")
}

/// Canonical text of a segment.
pub fn serialize_segment(seg: &TurnSegment) -> String {
    render(&seg.reason, &seg.action)
}

/// Truncates generated text just after the earliest closing stop tag.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[&str]) -> &'a str {
    stops
        .iter()
        .filter_map(|t| text.find(t).map(|i| i + t.len()))
        .min()
        .map_or(text, |end| &text[..end])
}

#[derive(Debug, Clone, Copy)]
struct Tag {
    name: &'static str,
    close: bool,
    start: usize,
    end: usize,
}

fn match_tag(rest: &str) -> Option<(&'static str, bool, usize)> {
    let (close, body) = match rest.strip_prefix("</") {
        Some(b) => (true, b),
        None => (false, rest.strip_prefix('<')?),
    };
    TAG_NAMES.iter().find_map(|name| {
        body.strip_prefix(name)
            .filter(|after| after.starts_with('>'))
            .map(|_| (*name, close, name.len() + if close { 3 } else { 2 }))
    })
}

fn scan_tags(raw: &str) -> Vec<Tag> {
    raw.match_indices('<')
        .filter_map(|(i, _)| {
            match_tag(&raw[i..]).map(|(name, close, len)| Tag {
                name,
                close,
                start: i,
                end: i + len,
            })
        })
        .collect()
}

fn first_non_ws(raw: &str, from: usize, to: usize) -> Option<usize> {
    raw[from..to]
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(i, _)| from + i)
}

struct Block<'a> {
    name: &'static str,
    start: usize,
    content_start: usize,
    content: &'a str,
}

fn split_blocks(raw: &str) -> Result<Vec<Block<'_>>, ProtocolError> {
    let tags = scan_tags(raw);
    let mut blocks = Vec::new();
    let mut pos = 0;
    let mut i = 0;
    while i < tags.len() {
        let open = tags[i];
        if let Some(offset) = first_non_ws(raw, pos, open.start) {
            return Err(ProtocolError::StrayContent { offset });
        }
        if open.close {
            return Err(ProtocolError::UnbalancedTags { offset: open.start });
        }
        let close = match tags.get(i + 1) {
            Some(t) if t.close && t.name == open.name => *t,
            Some(t) => return Err(ProtocolError::UnbalancedTags { offset: t.start }),
            None => return Err(ProtocolError::UnbalancedTags { offset: open.start }),
        };
        blocks.push(Block {
            name: open.name,
            start: open.start,
            content_start: open.end,
            content: &raw[open.end..close.start],
        });
        pos = close.end;
        i += 2;
    }
    if let Some(offset) = first_non_ws(raw, pos, raw.len()) {
        return Err(ProtocolError::StrayContent { offset });
    }
    Ok(blocks)
}

fn malformed(offset: usize, detail: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedPayload {
        offset,
        detail: detail.into(),
    }
}

fn decode_search(block: &Block<'_>, modality: Modality) -> Result<Action, ProtocolError> {
    let wire: SearchWire =
        serde_json::from_str(block.content).map_err(|e| malformed(block.content_start, e.to_string()))?;
    if wire.queries.is_empty() {
        return Err(malformed(block.content_start, "queries must be non-empty"));
    }
    if let Some(i) = wire.queries.iter().position(|q| q.q.trim().is_empty()) {
        return Err(malformed(block.content_start, format!("query {i} is empty")));
    }
    Ok(Action::Search(SearchQuerySet {
        modality,
        entries: wire.queries,
    }))
}

fn decode_answer(block: &Block<'_>) -> Result<Action, ProtocolError> {
    // Box validity is enforced by BBox's deserializer.
    let payload: AnswerPayload =
        serde_json::from_str(block.content).map_err(|e| malformed(block.content_start, e.to_string()))?;
    if let Some(i) = payload.entities.iter().position(|e| e.span.trim().is_empty()) {
        return Err(malformed(block.content_start, format!("entity {i} has an empty span")));
    }
    Ok(Action::Answer(payload))
}

/// Parses one generated segment; see the module docs for the grammar.
pub fn parse_segment(raw: &str) -> Result<TurnSegment, ProtocolError> {
    let blocks = split_blocks(raw)?;
    if let Some(b) = blocks.iter().find(|b| b.name == INFORMATION) {
        return Err(ProtocolError::UnexpectedBlock {
            offset: b.start,
            tag: INFORMATION.into(),
        });
    }
    let Some(first) = blocks.first() else {
        return Err(ProtocolError::MissingReason { offset: 0 });
    };
    if first.name != REASON {
        return Err(ProtocolError::MissingReason { offset: first.start });
    }
    if let Some(b) = blocks[1..].iter().find(|b| b.name == REASON) {
        return Err(ProtocolError::MultipleReasons { offset: b.start });
    }
    let actions = &blocks[1..];
    let action_block = match actions {
        [] => return Err(ProtocolError::NoAction { offset: raw.len() }),
        [only] => only,
        [_, second, ..] => return Err(ProtocolError::MultipleActions { offset: second.start }),
    };
    let action = match action_block.name {
        TEXT_SEARCH => decode_search(action_block, Modality::Text)?,
        IMAGE_SEARCH => decode_search(action_block, Modality::Image)?,
        ANSWER => decode_answer(action_block)?,
        other => unreachable!("unexpected block {other}"),
    };
    Ok(TurnSegment {
        reason: first.content.to_string(),
        action,
        raw: raw.to_string(),
    })
}
