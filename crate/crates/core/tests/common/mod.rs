#![allow(dead_code)]

use gmner_agent::grpo::{emit_all, BatchRecord};
use gmner_agent::jsonl;
use gmner_agent::metrics::{seen_unseen_split, EvalSample, GoldSample, SplitReport, UnseenCriterion};
use gmner_agent::policy::ScriptedPolicy;
use gmner_agent::reward::{compute_reward, RewardConfig, RewardedTrajectory};
use gmner_agent::rollout::{run_group, PostInput, PromptTemplate, RolloutConfig, Trajectory};
use gmner_agent::secot::{filter_pool, SecotRecord, Synthesis, Verdict};
use gmner_agent::synthetic::{World, PROBE_SAMPLES};
use gmner_agent::tagger::{TagOutput, TagRun};
use gmner_agent::toolgw::{Gateway, LocalIndex};
use gmner_agent::Exec;

pub struct Pipeline {
    pub corpus: Vec<GoldSample>,
    pub tags: TagOutput,
    pub records: Vec<SecotRecord>,
    pub rollouts: Vec<RewardedTrajectory>,
    pub batch: Vec<BatchRecord>,
    pub report: SplitReport,
}

impl Pipeline {
    /// Every stage output serialized as it would be written to disk.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tags.jsonl", jsonl::to_string(&self.tags.reports)),
            ("cold_start.jsonl", jsonl::to_string(&self.tags.cold_start)),
            ("rl_pool.jsonl", jsonl::to_string(&self.tags.rl_pool)),
            ("secot.jsonl", jsonl::to_string(&self.records)),
            ("rollouts.jsonl", jsonl::to_string(&self.rollouts)),
            ("batch.jsonl", jsonl::to_string(&self.batch)),
            ("report.json", serde_json::to_string(&self.report).unwrap()),
        ]
    }

    pub fn accepted(&self) -> impl Iterator<Item = &SecotRecord> {
        self.records.iter().filter(|r| r.verdict == Verdict::Accepted)
    }
}

pub fn run_pipeline(seed: u64, exec: Exec) -> Pipeline {
    let world = World::standard();
    let corpus = world.corpus();
    let template = PromptTemplate::default();
    let tools = Gateway::local(LocalIndex::new(world.index_docs()));
    let rollout_cfg = RolloutConfig::default();

    let probe = ScriptedPolicy::from_entries(world.probe_fixture());
    let tags = TagRun {
        policy: &probe,
        template: &template,
        instruction: "",
        n: PROBE_SAMPLES,
        seed,
        iou_threshold: 0.5,
    }
    .run(exec, &corpus)
    .unwrap();

    let teacher = ScriptedPolicy::from_entries(world.teacher_fixture());
    let cold: std::collections::HashSet<&str> = tags.cold_start.iter().map(|m| m.id.as_str()).collect();
    let pool: Vec<_> = filter_pool(&tags.reports)
        .into_iter()
        .filter(|t| cold.contains(t.sample_id.as_str()))
        .collect();
    let records = Synthesis {
        teacher: &teacher,
        tools: &tools,
        rollout: rollout_cfg,
        template: &template,
        seed,
    }
    .build(exec, &corpus, &pool, 0, None);

    let policy = ScriptedPolicy::from_entries(world.policy_fixture());
    let reward_cfg = RewardConfig::default();
    let rl: Vec<&GoldSample> = tags
        .rl_pool
        .iter()
        .map(|m| corpus.iter().find(|s| s.id == m.id).unwrap())
        .collect();
    let groups: Vec<Vec<Trajectory>> = exec.map(&rl, |s| {
        let input = PostInput::from(*s);
        let prompt = template.render(&input, "");
        run_group(&input, &prompt, &policy, &tools, &rollout_cfg, 8, seed, Exec::Sequential).unwrap()
    });
    let rollouts: Vec<RewardedTrajectory> = groups
        .into_iter()
        .zip(&rl)
        .flat_map(|(g, s)| {
            g.into_iter().map(move |t| {
                let reward = compute_reward(&t, &s.entities, &reward_cfg);
                RewardedTrajectory { trajectory: t, reward }
            })
        })
        .collect();
    let batch = emit_all(exec, &rollouts).unwrap();

    let train: Vec<GoldSample> = records
        .iter()
        .filter(|r| r.verdict == Verdict::Accepted)
        .map(|r| corpus.iter().find(|s| s.id == r.sample_id).unwrap().clone())
        .collect();
    let empty = Vec::new();
    let samples: Vec<EvalSample<'_>> = rollouts
        .iter()
        .map(|r| EvalSample {
            preds: r.trajectory.final_answer.as_ref().map(|a| a.entities.as_slice()).unwrap_or(&empty),
            golds: &corpus.iter().find(|s| s.id == r.trajectory.input.id).unwrap().entities,
            n_tool_calls: Some(r.trajectory.n_tool_calls),
        })
        .collect();
    let report = seen_unseen_split(exec, &samples, &train, UnseenCriterion::Mention).unwrap();
    Pipeline {
        corpus,
        tags,
        records,
        rollouts,
        batch,
        report,
    }
}
