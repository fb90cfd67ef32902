//! Agentic grounded multimodal NER toolkit.
//!
//! The crate is organised around the loop a tool-using policy runs over an
//! image–text post:
//!
//! * [`protocol`] parses and emits the tag-based action grammar
//!   (`<reason>`, `<text_search>`, `<image_search>`, `<answer>`, `<information>`).
//! * [`rollout`] drives the multi-turn reason-then-act loop against a
//!   [`policy::Policy`] and a [`toolgw::Tools`] handle.
//! * [`toolgw`] is the caching multimodal search gateway (in-process or HTTP).
//! * [`tagger`] turns N forward samples into per-entity search tags.
//! * [`metrics`] implements strict GMNER / MNER / EEG scoring.
//! * [`reward`] and [`grpo`] compute the gated hybrid reward, group-relative
//!   advantages, token masks and the clipped surrogate objective.
//! * [`secot`] synthesises and validates tag-conditioned cold-start trajectories.
//! * [`synthetic`] is a small deterministic world used by tests, benches and the CLI demo.
//!
//! Data-parallel work (group rollouts, dataset tagging, corpus scoring, batch
//! emission) goes through [`exec::Exec`], which uses rayon when the `parallel`
//! feature is enabled and falls back to sequential iteration otherwise.

pub mod config;
pub mod exec;
pub mod grpo;
pub mod jsonl;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod reward;
pub mod rollout;
pub mod secot;
pub mod synthetic;
pub mod tagger;
pub mod toolgw;

pub use exec::Exec;
pub use metrics::{BBox, GoldEntity, GoldSample, PredEntity, ScoreReport, Task};
pub use protocol::{Action, ActionKind, Modality, Observation, TurnSegment};
pub use rollout::{RolloutConfig, Trajectory, TrajectoryStatus};
