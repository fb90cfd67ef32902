//! A small deterministic world: 20 posts with 40 entities, a local search
//! index over them, and scripted policies for every stage of the pipeline.
//!
//! Each entity carries a text level and a region level in `0..=4`: the number
//! of the four probe samples in which the base model gets its type, and its
//! region, right. Those levels fix the search tags the tagger will assign,
//! which in turn drive the teacher script.
//!
//! [`World::files`] renders the bundled fixture set under `fixtures/synthetic`.

pub mod ablation;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl;
use crate::metrics::{BBox, GoldEntity, GoldSample, PredEntity};
use crate::policy::FixtureEntry;
use crate::protocol::{answer_json, search_json, AnswerPayload, Modality, SearchQuery};
use crate::tagger::{assign_tag, HitCounts, SearchTag};
use crate::toolgw::IndexDoc;

/// Forward samples scripted per post in the probe fixture.
pub const PROBE_SAMPLES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntity {
    pub span: String,
    pub type_label: String,
    pub region: Option<BBox>,
    pub text_level: usize,
    pub region_level: usize,
}

impl SynthEntity {
    pub fn gold(&self) -> GoldEntity {
        GoldEntity::new(self.span.clone(), self.type_label.clone(), self.region.into_iter().collect())
    }

    pub fn correct(&self) -> PredEntity {
        PredEntity::new(self.span.clone(), self.type_label.clone(), self.region)
    }

    /// The prediction with the type and/or region wrong.
    pub fn wrong(&self, type_ok: bool, region_ok: bool) -> PredEntity {
        let type_label = if type_ok {
            self.type_label.clone()
        } else {
            wrong_type(&self.type_label).to_string()
        };
        let region = if region_ok { self.region } else { Some(decoy_box(self.region)) };
        PredEntity::new(self.span.clone(), type_label, region)
    }

    pub fn tags(&self) -> Vec<SearchTag> {
        assign_tag(HitCounts {
            hit_text: self.text_level,
            hit_region: self.region_level,
            n: PROBE_SAMPLES,
        })
    }

    fn slug(&self) -> String {
        self.span.to_lowercase().replace(' ', "-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPost {
    pub id: String,
    pub text: String,
    pub image_ref: String,
    pub entities: Vec<SynthEntity>,
}

impl SynthPost {
    pub fn gold(&self) -> GoldSample {
        GoldSample {
            id: self.id.clone(),
            text: self.text.clone(),
            image_ref: self.image_ref.clone(),
            entities: self.entities.iter().map(SynthEntity::gold).collect(),
        }
    }
}

fn wrong_type(t: &str) -> &'static str {
    match t {
        "PER" => "ORG",
        "ORG" => "LOC",
        "LOC" => "PER",
        _ => "ORG",
    }
}

fn decoy_box(gold: Option<BBox>) -> BBox {
    let decoy = BBox::new(600.0, 440.0, 630.0, 470.0).expect("valid box");
    match gold {
        Some(g) if crate::metrics::iou(&g, &decoy) > 0.0 => BBox::new(0.0, 0.0, 10.0, 10.0).expect("valid box"),
        _ => decoy,
    }
}

fn type_word(t: &str) -> &'static str {
    match t {
        "PER" => "person",
        "ORG" => "organization",
        "LOC" => "place",
        _ => "event",
    }
}

// (span, type, groundable, text level, region level)
type Row = (&'static str, &'static str, bool, usize, usize);

const POSTS: [[Row; 2]; 20] = [
    [("Mara Quell", "PER", true, 4, 4), ("Brightwater FC", "ORG", true, 4, 4)],
    [("Tobin Arkwright", "PER", true, 4, 4), ("Port Calder", "LOC", false, 4, 4)],
    [("Lumen Records", "ORG", false, 4, 4), ("Sela Varga", "PER", true, 4, 4)],
    [("Corvid Cup", "OTHER", true, 4, 4), ("Halden Park", "LOC", true, 4, 4)],
    [("Ines Marlow", "PER", true, 4, 4), ("Northgate Council", "ORG", false, 4, 4)],
    [("Vesper Bay", "LOC", true, 4, 4), ("Kade Orsino", "PER", true, 4, 4)],
    [("Ashfield Rovers", "ORG", true, 0, 4), ("Juno Tal", "PER", true, 4, 4)],
    [("Mirefall", "LOC", false, 0, 4), ("Orrin Pike", "PER", true, 4, 4)],
    [("Glasswing Festival", "OTHER", true, 4, 4), ("Delia Fenn", "PER", true, 0, 4)],
    [("Stonereach Bank", "ORG", true, 0, 4), ("Rook Hollow", "LOC", false, 0, 4)],
    [("Piet Calloway", "PER", true, 4, 0), ("Emberline", "ORG", false, 4, 4)],
    [("Saltmere", "LOC", false, 4, 4), ("Nadia Crest", "PER", true, 4, 0)],
    [("Quillon Prize", "OTHER", true, 0, 0), ("Wren Addler", "PER", true, 4, 4)],
    [("Tidewater Union", "ORG", true, 0, 4), ("Ferro Basin", "LOC", true, 2, 3)],
    [("Lio Brandt", "PER", true, 3, 4), ("Cinder Arena", "LOC", true, 4, 2)],
    [("Harrow Mills", "ORG", true, 2, 2), ("Esme Rook", "PER", true, 4, 4)],
    [("Olive Street Market", "LOC", true, 1, 3), ("Dax Merrow", "PER", true, 3, 3)],
    [("Nightjar Games", "ORG", false, 4, 1), ("Teo Valance", "PER", true, 2, 4)],
    [("Greyspire", "LOC", true, 3, 2), ("Amara Lisle", "PER", true, 3, 4)],
    [("Corvid Cup", "OTHER", true, 1, 1), ("Kade Orsino", "PER", true, 4, 3)],
];

const TEXTS: [&str; 4] = [
    "{a} spotted with {b} this weekend!",
    "Big day for {a} at {b} #live",
    "{a} meets {b} , what a match",
    "Throwback: {a} and {b}",
];

/// Posts whose teacher script deliberately misbehaves.
const TEACHER_SEARCHES_KNOWN: usize = 2;
const TEACHER_ANSWERS_WRONG: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub posts: Vec<SynthPost>,
}

fn answer_segment(reason: &str, entities: Vec<PredEntity>) -> String {
    format!(
        "<reason>{reason}</reason>\n<answer>{}</answer>",
        answer_json(&AnswerPayload { entities })
    )
}

fn search_segment(reason: &str, modality: Modality, queries: Vec<SearchQuery>) -> String {
    let tag = modality.tag();
    format!("<reason>{reason}</reason>\n<{tag}>{}</{tag}>", search_json(&queries))
}

fn entry(id: &str, turn: usize, text: String) -> FixtureEntry {
    FixtureEntry {
        trajectory_id: id.to_string(),
        turn_index: turn,
        text,
    }
}

fn text_query(e: &SynthEntity) -> SearchQuery {
    SearchQuery::new(e.span.clone(), format!("{} {}", e.span, type_word(&e.type_label)))
}

fn image_query(e: &SynthEntity) -> SearchQuery {
    SearchQuery::new(e.span.clone(), format!("{} photo", e.span))
}

fn describe(entities: &[PredEntity]) -> String {
    entities
        .iter()
        .map(|p| format!("{} is {} {}", p.span, article(&p.type_label), p.type_label))
        .collect::<Vec<_>>()
        .join(", ")
}

fn article(t: &str) -> &'static str {
    if t == "ORG" || t == "OTHER" {
        "an"
    } else {
        "a"
    }
}

impl World {
    pub fn standard() -> Self {
        let posts = POSTS
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                let entities: Vec<SynthEntity> = rows
                    .iter()
                    .enumerate()
                    .map(|(slot, &(span, ty, groundable, tl, rl))| {
                        let region = groundable.then(|| {
                            let p = i as f64;
                            if slot == 0 {
                                BBox::new(40.0 + 8.0 * p, 60.0, 240.0 + 8.0 * p, 300.0)
                            } else {
                                BBox::new(400.0, 80.0 + 5.0 * p, 590.0, 400.0 + 2.0 * p)
                            }
                            .expect("valid box")
                        });
                        SynthEntity {
                            span: span.into(),
                            type_label: ty.into(),
                            region,
                            text_level: tl,
                            region_level: rl,
                        }
                    })
                    .collect();
                let text = TEXTS[i % TEXTS.len()]
                    .replace("{a}", &entities[0].span)
                    .replace("{b}", &entities[1].span);
                SynthPost {
                    id: format!("post-{i:02}"),
                    text,
                    image_ref: format!("images/post-{i:02}.jpg"),
                    entities,
                }
            })
            .collect();
        World { posts }
    }

    pub fn corpus(&self) -> Vec<GoldSample> {
        self.posts.iter().map(SynthPost::gold).collect()
    }

    pub fn post(&self, id: &str) -> Option<&SynthPost> {
        self.posts.iter().find(|p| p.id == id)
    }

    /// One text document per distinct entity, plus an image document per groundable one.
    pub fn index_docs(&self) -> Vec<IndexDoc> {
        let mut seen = std::collections::HashSet::new();
        let mut docs = Vec::new();
        for e in self.posts.iter().flat_map(|p| &p.entities) {
            if !seen.insert(e.span.clone()) {
                continue;
            }
            let slug = e.slug();
            docs.push(IndexDoc {
                modality: Modality::Text,
                title: e.span.clone(),
                snippet: format!("{} is {} {} often mentioned on social media.", e.span, article(&e.type_label), type_word(&e.type_label)),
                url: format!("https://example.org/wiki/{slug}"),
                image_ref: None,
                keywords: vec![type_word(&e.type_label).into()],
            });
            if e.region.is_some() {
                docs.push(IndexDoc {
                    modality: Modality::Image,
                    title: format!("{} photo", e.span),
                    snippet: format!("A photo showing {}.", e.span),
                    url: format!("https://example.org/images/{slug}"),
                    image_ref: Some(format!("index/{slug}.jpg")),
                    keywords: vec![],
                });
            }
        }
        docs
    }

    /// Direct answers for the tagger: in sample `k`, an entity's type is right
    /// iff `k < text_level` and its region is right iff `k < region_level`.
    pub fn probe_fixture(&self) -> Vec<FixtureEntry> {
        let mut out = Vec::new();
        for p in &self.posts {
            for k in 0..PROBE_SAMPLES {
                let preds: Vec<PredEntity> = p
                    .entities
                    .iter()
                    .map(|e| e.wrong(k < e.text_level, k < e.region_level))
                    .collect();
                out.push(entry(&p.id, k, answer_segment(&describe(&preds), preds)));
            }
        }
        out
    }

    /// Expected per-entity tags, in corpus order.
    pub fn expected_tags(&self) -> Vec<(String, String, Vec<SearchTag>)> {
        self.posts
            .iter()
            .flat_map(|p| p.entities.iter().map(move |e| (p.id.clone(), e.span.clone(), e.tags())))
            .collect()
    }

    /// Teacher turns that follow each post's tags: a text search for
    /// `TEXT_SEARCH` entities, an image search for `IMAGE_SEARCH` entities, then
    /// the gold answer. Two posts misbehave so the validator has work to do.
    pub fn teacher_fixture(&self) -> Vec<FixtureEntry> {
        let mut out = Vec::new();
        for (i, p) in self.posts.iter().enumerate() {
            let names: Vec<&str> = p.entities.iter().map(|e| e.span.as_str()).collect();
            let intro = format!("The post mentions {}.", names.join(" and "));
            let mut text: Vec<&SynthEntity> =
                p.entities.iter().filter(|e| e.tags().contains(&SearchTag::TextSearch)).collect();
            let image: Vec<&SynthEntity> =
                p.entities.iter().filter(|e| e.tags().contains(&SearchTag::ImageSearch)).collect();
            if i == TEACHER_SEARCHES_KNOWN {
                text.push(&p.entities[0]);
            }
            let mut turn = 0;
            if !text.is_empty() {
                let who: Vec<&str> = text.iter().map(|e| e.span.as_str()).collect();
                let reason = format!("{intro} I am not sure what {} is, I need to search.", who.join(" or "));
                out.push(entry(
                    &p.id,
                    turn,
                    search_segment(&reason, Modality::Text, text.iter().map(|e| text_query(e)).collect()),
                ));
                turn += 1;
            }
            if !image.is_empty() {
                let who: Vec<&str> = image.iter().map(|e| e.span.as_str()).collect();
                let reason = format!(
                    "{intro} I am not sure where {} appears in the image, I need to search.",
                    who.join(" or ")
                );
                out.push(entry(
                    &p.id,
                    turn,
                    search_segment(&reason, Modality::Image, image.iter().map(|e| image_query(e)).collect()),
                ));
                turn += 1;
            }
            let mut preds: Vec<PredEntity> = p.entities.iter().map(SynthEntity::correct).collect();
            if i == TEACHER_ANSWERS_WRONG {
                preds[1] = p.entities[1].wrong(false, true);
            }
            let reason = format!("{intro} {}.", describe(&preds));
            out.push(entry(&p.id, turn, answer_segment(&reason, preds)));
        }
        out
    }

    /// A stochastic policy for group rollouts. Turn 0 alternatives: a correct
    /// direct answer, a direct answer with the least-known entity wrong, a text
    /// search, an image search, and a malformed segment. Turn 1 answers,
    /// correctly two times in three.
    pub fn policy_fixture(&self) -> Vec<FixtureEntry> {
        let mut out = Vec::new();
        for p in &self.posts {
            let names: Vec<&str> = p.entities.iter().map(|e| e.span.as_str()).collect();
            let intro = format!("The post mentions {}.", names.join(" and "));
            let correct: Vec<PredEntity> = p.entities.iter().map(SynthEntity::correct).collect();
            let weakest = p
                .entities
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.text_level + e.region_level)
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut partly = correct.clone();
            let w = &p.entities[weakest];
            partly[weakest] = w.wrong(w.text_level >= PROBE_SAMPLES, w.region_level >= PROBE_SAMPLES);
            if partly == correct {
                partly[weakest] = w.wrong(false, true);
            }
            let right = answer_segment(&format!("{intro} {}.", describe(&correct)), correct.clone());
            let wrong = answer_segment(&format!("{intro} {}.", describe(&partly)), partly);
            let weak = &p.entities[weakest];
            out.push(entry(&p.id, 0, right.clone()));
            out.push(entry(&p.id, 0, wrong.clone()));
            out.push(entry(
                &p.id,
                0,
                search_segment(
                    &format!("{intro} I am not sure what {} is, I need to search.", weak.span),
                    Modality::Text,
                    vec![text_query(weak)],
                ),
            ));
            out.push(entry(
                &p.id,
                0,
                search_segment(
                    &format!("{intro} I am not sure where {} is in the image, I need to search.", weak.span),
                    Modality::Image,
                    vec![image_query(weak)],
                ),
            ));
            out.push(entry(&p.id, 0, format!("<reason>{intro} Let me think.</reason>")));
            out.push(entry(&p.id, 1, right.clone()));
            out.push(entry(&p.id, 1, right));
            out.push(entry(&p.id, 1, wrong));
        }
        out
    }

    /// Fixture files by name, as written to disk.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus.jsonl", jsonl::to_string(&self.corpus())),
            ("index.jsonl", jsonl::to_string(&self.index_docs())),
            ("probe.jsonl", jsonl::to_string(&self.probe_fixture())),
            ("teacher.jsonl", jsonl::to_string(&self.teacher_fixture())),
            ("policy.jsonl", jsonl::to_string(&self.policy_fixture())),
        ]
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, body) in self.files() {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// Directory of the bundled fixture set.
pub fn bundled_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagger::SearchTag::*;

    #[test]
    fn shape() {
        let w = World::standard();
        assert_eq!(w.posts.len(), 20);
        assert_eq!(w.posts.iter().map(|p| p.entities.len()).sum::<usize>(), 40);
        let ids: std::collections::HashSet<_> = w.posts.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), 20);
        for p in &w.posts {
            for e in &p.entities {
                assert!(p.text.contains(&e.span), "{} not in {}", e.span, p.text);
            }
        }
    }

    #[test]
    fn tag_mix() {
        let w = World::standard();
        let tags = w.expected_tags();
        let count = |t: SearchTag| tags.iter().filter(|(_, _, ts)| ts.contains(&t)).count();
        assert_eq!(count(NoSearch), 19);
        assert_eq!(count(TextSearch), 7);
        assert_eq!(count(ImageSearch), 3);
        assert_eq!(count(Adaptive), 12);
    }

    #[test]
    fn bundled_fixtures_match_generator() {
        let dir = bundled_dir();
        for (name, body) in World::standard().files() {
            let on_disk = std::fs::read_to_string(dir.join(name))
                .unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()));
            assert!(on_disk == body, "{name} is stale; regenerate with `cargo run --example write_synthetic`");
        }
    }
}
