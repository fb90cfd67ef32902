//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use gmner_agent::grpo::{clipped_term, group_advantages, surrogate_objective, TokenBatch};
use gmner_agent::metrics::{iou, match_count, BBox, GoldEntity, PredEntity, Task};
use gmner_agent::policy::{FixtureEntry, ScriptedPolicy};
use gmner_agent::protocol::{parse_segment, Modality, SearchQuery};
use gmner_agent::reward::{combine, compute_reward, RewardConfig};
use gmner_agent::rollout::{run_rollout, PostInput, RolloutConfig, RolloutRequest, TrajectoryStatus};
use gmner_agent::secot::{check_accepted, replays_identically};
use gmner_agent::synthetic::ablation::{train, AblationConfig};
use gmner_agent::synthetic::World;
use gmner_agent::tagger::{assign_tag, HitCounts, SearchTag};
use gmner_agent::toolgw::backend::BackendError;
use gmner_agent::toolgw::http::{spawn, RemoteTools};
use gmner_agent::toolgw::{similarity, Gateway, LocalIndex, SearchBackend, SearchCache, SearchResult};
use gmner_agent::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Outcome {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, want {b}"))
}

// 1. Reward exactness and gating.
fn reward_exactness() -> Outcome {
    let cfg = RewardConfig::default();
    let r = combine(1.0, true, 2.0, &cfg);
    close(r.total, 0.98, 1e-12, "R_F1=1, R_fmt=1, n_search=2")?;
    ensure(r.penalty_active, || "penalty should be active".into())?;
    let r = combine(0.79, true, 10.0, &cfg);
    close(r.total, 0.811, 1e-12, "R_F1=0.79, n_search=10")?;
    ensure(!r.penalty_active, || "penalty should be inactive below the gate".into())?;

    // The same value through a real trajectory: two searches, one gold entity.
    let world = World::standard();
    let post = &world.posts[0];
    let gold = vec![post.entities[0].gold()];
    let answer = format!(
        "<reason>ok</reason><answer>{}</answer>",
        gmner_agent::protocol::answer_json(&gmner_agent::protocol::AnswerPayload {
            entities: vec![post.entities[0].correct()]
        })
    );
    let search = r#"<reason>Who is Mara Quell?</reason><text_search>{"queries":[{"entity":"Mara Quell","q":"Mara Quell"}]}</text_search>"#;
    let t = scripted_rollout(&[search, search, &answer], RolloutConfig::default())?;
    let r = compute_reward(&t, &gold, &cfg);
    close(r.r_f1, 1.0, 0.0, "trajectory F1")?;
    close(r.n_search, 2.0, 0.0, "trajectory n_search")?;
    close(r.total, 0.98, 1e-12, "trajectory reward")
}

// 2. Tag assignment against a literal transcription of the rule.
fn oracle_tags(ht: usize, hr: usize, n: usize) -> BTreeSet<SearchTag> {
    let mut out = BTreeSet::new();
    match (ht, hr) {
        (0, 0) => {
            out.insert(SearchTag::TextSearch);
            out.insert(SearchTag::ImageSearch);
        }
        (0, _) => {
            out.insert(SearchTag::TextSearch);
        }
        (_, 0) => {
            out.insert(SearchTag::ImageSearch);
        }
        (t, r) if t == n && r == n => {
            out.insert(SearchTag::NoSearch);
        }
        _ => {
            out.insert(SearchTag::Adaptive);
        }
    }
    out
}

fn tag_oracle() -> Outcome {
    let mut cases = 0;
    for n in 1..=6 {
        for ht in 0..=n {
            for hr in 0..=n {
                let got: Vec<SearchTag> = assign_tag(HitCounts {
                    hit_text: ht,
                    hit_region: hr,
                    n,
                });
                let set: BTreeSet<SearchTag> = got.iter().copied().collect();
                ensure(set.len() == got.len(), || format!("duplicate tags {got:?}"))?;
                ensure(set == oracle_tags(ht, hr, n), || {
                    format!("N={n} hit_text={ht} hit_region={hr}: {got:?}")
                })?;
                cases += 1;
            }
        }
    }
    ensure(cases == (2..=7).map(|k| k * k).sum::<usize>(), || format!("{cases} cases"))
}

// 3. Match counts against brute-force maximum matching.
fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = w * h;
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    if i == 0.0 {
        0.0
    } else {
        i / (area(a) + area(b) - i)
    }
}

fn oracle_correct(p: &PredEntity, g: &GoldEntity, task: Task) -> bool {
    let span = p.span.trim() == g.span.trim();
    let ty = p.type_label == g.type_label;
    let region = match &p.region {
        None => g.boxes.is_empty(),
        Some(pb) => g.boxes.iter().any(|gb| oracle_iou(pb.coords(), gb.coords()) > 0.5),
    };
    span && match task {
        Task::Gmner => ty && region,
        Task::Mner => ty,
        Task::Eeg => region,
    }
}

// Tries every assignment of predictions to distinct golds (or to nothing).
fn brute_force_matching(preds: &[PredEntity], golds: &[GoldEntity], task: Task) -> usize {
    fn go(i: usize, used: &mut Vec<bool>, preds: &[PredEntity], golds: &[GoldEntity], task: Task) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, used, preds, golds, task);
        for j in 0..golds.len() {
            if !used[j] && oracle_correct(&preds[i], &golds[j], task) {
                used[j] = true;
                best = best.max(1 + go(i + 1, used, preds, golds, task));
                used[j] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; golds.len()], preds, golds, task)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    // Coarse grid so overlaps, duplicates and exact 0.5 ratios all occur.
    let x1 = rng.random_range(0..6) as f64 * 2.0;
    let y1 = rng.random_range(0..6) as f64 * 2.0;
    let w = rng.random_range(1..6) as f64 * 2.0;
    let h = rng.random_range(1..6) as f64 * 2.0;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn metric_oracle() -> Outcome {
    let spans = ["A", "B", "C"];
    let types = ["PER", "ORG"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..3000 {
        let golds: Vec<GoldEntity> = (0..rng.random_range(0..=5))
            .map(|_| {
                let boxes = (0..rng.random_range(0..=2)).map(|_| random_box(&mut rng)).collect();
                GoldEntity::new(spans[rng.random_range(0..3)], types[rng.random_range(0..2)], boxes)
            })
            .collect();
        let preds: Vec<PredEntity> = (0..rng.random_range(0..=5))
            .map(|_| {
                let region = rng.random_bool(0.7).then(|| random_box(&mut rng));
                PredEntity::new(spans[rng.random_range(0..3)], types[rng.random_range(0..2)], region)
            })
            .collect();
        for task in Task::ALL {
            let got = match_count(&preds, &golds, task);
            let want = brute_force_matching(&preds, &golds, task);
            ensure(got == want, || format!("case {case} {task:?}: {got} vs oracle {want}"))?;
        }
    }
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    close(iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)), 1.0, 0.0, "identical")?;
    close(iou(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 20.0, 30.0, 30.0)), 0.0, 0.0, "disjoint")?;
    close(iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 15.0, 10.0)), 1.0 / 3.0, 0.0, "half overlap")?;
    // IoU of exactly 0.5 is not a hit.
    let half = b(0.0, 0.0, 10.0, 5.0);
    close(iou(&b(0.0, 0.0, 10.0, 10.0), &half), 0.5, 0.0, "boundary pair")?;
    let g = GoldEntity::new("A", "PER", vec![b(0.0, 0.0, 10.0, 10.0)]);
    let p = PredEntity::new("A", "PER", Some(half));
    ensure(match_count(&[p], &[g], Task::Gmner) == 0, || "IoU = 0.5 counted as a hit".into())
}

// 4. GRPO advantages and surrogate.
fn grpo_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-1.0..1.5)).collect();
        let a = group_advantages(&rewards).map_err(|e| e.to_string())?;
        let mean = a.advantages.iter().sum::<f64>() / g as f64;
        ensure(mean.abs() < 1e-10, || format!("mean advantage {mean} for {rewards:?}"))?;
    }
    let a = group_advantages(&[1.0, 1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let h = 3f64.sqrt() / 2.0;
    for (got, want) in a.advantages.iter().zip([h, h, -h, -h]) {
        close(*got, want, 1e-12, "advantage of [1,1,0,0]")?;
    }

    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lp: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..0.0)).collect();
    let mask: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
    let same = TokenBatch {
        logp_new: lp.clone(),
        logp_old: lp.clone(),
        logp_ref: lp.clone(),
        mask: mask.clone(),
        advantage: 0.7,
        clip_eps: 0.2,
        kl_beta: 0.001,
    };
    close(surrogate_objective(&same).map_err(|e| e.to_string())?, 0.7, 1e-12, "identical streams")?;

    let mut base = same.clone();
    base.logp_new = lp.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
    base.logp_ref = lp.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
    let before = surrogate_objective(&base).map_err(|e| e.to_string())?;
    let mut perturbed = base.clone();
    for t in (0..n).filter(|&t| mask[t] == 0) {
        perturbed.logp_new[t] += 3.0;
        perturbed.logp_old[t] -= 2.0;
        perturbed.logp_ref[t] += 1.0;
    }
    let after = surrogate_objective(&perturbed).map_err(|e| e.to_string())?;
    ensure(before == after, || format!("masked perturbation moved the objective: {before} -> {after}"))?;

    close(clipped_term(2.0, 1.0, 0.2), 1.2, 1e-15, "ρ=2, Â=1")?;
    close(clipped_term(0.5, -1.0, 0.2), -0.8, 1e-15, "ρ=0.5, Â=-1")
}

// 5. Parser fuzzing and rollout termination.
fn scripted_rollout(turns: &[&str], cfg: RolloutConfig) -> Result<gmner_agent::Trajectory, String> {
    let world = World::standard();
    let policy = ScriptedPolicy::from_entries(turns.iter().enumerate().map(|(i, t)| FixtureEntry {
        trajectory_id: "t".into(),
        turn_index: i,
        text: t.to_string(),
    }));
    let tools = Gateway::local(LocalIndex::new(world.index_docs()));
    let input = PostInput::from(&world.corpus()[0]);
    run_rollout(
        RolloutRequest {
            trajectory_id: "t",
            input: &input,
            prompt: "prompt",
            seed: 0,
        },
        &policy,
        &tools,
        &cfg,
    )
    .map_err(|e| e.to_string())
}

fn action_tags(raw: &str) -> usize {
    ["<text_search>", "<image_search>", "<answer>"]
        .iter()
        .map(|t| raw.matches(t).count())
        .sum()
}

fn protocol_and_termination() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pieces = [
        "<reason>", "</reason>", "<answer>", "</answer>", "<text_search>", "</text_search>", "<image_search>",
        "</image_search>", "<information>", "</information>", "{\"entities\":[]}",
        "{\"queries\":[{\"entity\":\"a\",\"q\":\"a\"}]}", "x", " ", "\n", "<", ">", "/",
    ];
    let mut accepted = 0;
    for i in 0..100_000 {
        let input: String = match i % 3 {
            0 => {
                let len = rng.random_range(0..64);
                let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            1 => (0..rng.random_range(0..8)).map(|_| pieces[rng.random_range(0..pieces.len())]).collect(),
            _ => {
                // A well-formed segment with up to two pieces inserted or removed.
                let (open, body, close) = [(4, 11, 5), (6, 11, 7), (2, 10, 3)][rng.random_range(0..3)];
                let mut seq: Vec<&str> = vec![pieces[0], "x", pieces[1], pieces[open], pieces[body], pieces[close]];
                for _ in 0..rng.random_range(0..=2) {
                    if rng.random_bool(0.5) && !seq.is_empty() {
                        seq.remove(rng.random_range(0..seq.len()));
                    } else {
                        seq.insert(rng.random_range(0..=seq.len()), pieces[rng.random_range(0..pieces.len())]);
                    }
                }
                seq.concat()
            }
        };
        let parsed = catch_unwind(AssertUnwindSafe(|| parse_segment(&input)))
            .map_err(|_| format!("parser panicked on {input:?}"))?;
        if let Ok(seg) = parsed {
            accepted += 1;
            ensure(action_tags(&input) == 1 && action_tags(seg.raw()) == 1, || {
                format!("accepted a segment without exactly one action: {input:?}")
            })?;
        }
    }
    ensure(accepted > 0, || "structured fuzzing never produced a valid segment".into())?;

    let search = r#"<reason>r</reason><text_search>{"queries":[{"entity":"Mara Quell","q":"Mara Quell"}]}</text_search>"#;
    let answer = r#"<reason>r</reason><answer>{"entities":[]}</answer>"#;
    let choices = [search, answer, "garbage", "<reason>r</reason>", "<answer>{}</answer>", ""];
    for m in 1..=4 {
        for retries in 0..=4 {
            let cfg = RolloutConfig {
                max_actions: m,
                max_invalid_retries: retries,
                ..Default::default()
            };
            for _ in 0..40 {
                // Adversarial scripts mostly stall; answers are rare.
                let turns: Vec<&str> = (0..32)
                    .map(|_| {
                        let k = rng.random_range(0..20);
                        if k == 0 { choices[1] } else { choices[[0, 2, 3, 4, 5][k % 5]] }
                    })
                    .collect();
                let t = scripted_rollout(&turns, cfg)?;
                ensure(t.turns.len() <= m + retries + 1, || {
                    format!("M={m} retries={retries}: {} turns", t.turns.len())
                })?;
                ensure(t.n_tool_calls <= m, || format!("{} tool calls with M={m}", t.n_tool_calls))?;
                t.check()?;
            }
        }
    }
    let t = scripted_rollout(&[search; 8], RolloutConfig::default())?;
    ensure(t.n_tool_calls == 3 && t.status == TrajectoryStatus::BudgetExhausted, || {
        format!("budget fixture: {} calls, {:?}", t.n_tool_calls, t.status)
    })?;
    ensure(t.final_answer.is_none(), || "budget exhaustion produced an answer".into())
}

// 6. Gateway cache boundary, single-flight and K.
struct Counting {
    calls: AtomicUsize,
}

impl SearchBackend for Counting {
    fn search(&self, query: &str, _: Modality, _: usize) -> Result<Vec<SearchResult>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(200));
        Ok((0..10)
            .map(|i| SearchResult::text(format!("{query} {i}"), "s", format!("https://e/{i}")))
            .collect())
    }

    fn id(&self) -> String {
        "counting".into()
    }
}

fn gateway() -> Outcome {
    let base = format!("{}{}", "x".repeat(89), "y".repeat(11));
    let at_089 = format!("{}{}", "x".repeat(89), "z".repeat(11));
    let base2 = format!("{}{}", "a".repeat(91), "b".repeat(9));
    let at_091 = format!("{}{}", "a".repeat(91), "c".repeat(9));
    close(similarity(&base, &at_089), 0.89, 1e-12, "constructed 0.89 pair")?;
    close(similarity(&base2, &at_091), 0.91, 1e-12, "constructed 0.91 pair")?;

    let backend = Arc::new(Counting {
        calls: AtomicUsize::new(0),
    });
    let gw = Gateway::new(backend.clone(), SearchCache::in_memory(0.9), 3);
    let outcome = |q: &str| gw.search(q, Modality::Text).map_err(|e| e.to_string());
    ensure(!outcome(&base)?.cache_hit, || "first query hit".into())?;
    ensure(outcome(&base)?.cache_hit, || "miss at similarity 1.0".into())?;
    ensure(!outcome(&at_089)?.cache_hit, || "hit at similarity 0.89".into())?;
    ensure(!outcome(&base2)?.cache_hit, || "unexpected hit for the second base".into())?;
    ensure(outcome(&at_091)?.cache_hit, || "miss at similarity 0.91".into())?;

    let backend = Arc::new(Counting {
        calls: AtomicUsize::new(0),
    });
    let gw = Arc::new(Gateway::new(backend.clone(), SearchCache::in_memory(0.9), 3));
    let svc = spawn("127.0.0.1:0", gw).map_err(|e| e.to_string())?;
    let barrier = Arc::new(Barrier::new(16));
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (url, barrier) = (svc.base_url(), barrier.clone());
            std::thread::spawn(move || {
                let client = RemoteTools::new(url, Duration::from_secs(30));
                barrier.wait();
                client.search_batch(Modality::Image, &[SearchQuery::new("e", "same query")])
            })
        })
        .collect();
    for h in handles {
        let r = h.join().map_err(|_| "client thread panicked".to_string())?.map_err(|e| e.to_string())?;
        ensure(r[0].results.len() <= 3, || format!("{} results", r[0].results.len()))?;
    }
    let calls = backend.calls.load(Ordering::SeqCst);
    ensure(calls == 1, || format!("16 concurrent misses made {calls} backend calls"))?;

    let world = World::standard();
    let gw = Gateway::local(LocalIndex::new(world.index_docs()));
    for s in world.corpus() {
        for m in [Modality::Text, Modality::Image] {
            let r = gw.search(&format!("{} photo person", s.text), m).map_err(|e| e.to_string())?;
            ensure(r.results.len() <= 3, || format!("{} results", r.results.len()))?;
        }
    }
    Ok(())
}

// 7. End-to-end golden pipeline.
fn golden_pipeline() -> Outcome {
    let a = common::run_pipeline(17, Exec::default());
    let b = common::run_pipeline(17, Exec::default());
    let (fa, fb) = (a.files(), b.files());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    ensure(a.corpus.len() == 20 && a.corpus.iter().map(|s| s.entities.len()).sum::<usize>() == 40, || {
        "corpus shape".into()
    })?;
    ensure(a.rollouts.len() == a.tags.rl_pool.len() * 8 && !a.batch.is_empty(), || "rollout groups".into())?;
    let world = World::standard();
    let tools = Gateway::local(LocalIndex::new(world.index_docs()));
    let mut n = 0;
    for r in a.accepted() {
        check_accepted(r).map_err(|e| format!("{}: {e}", r.sample_id))?;
        ensure(replays_identically(r, &tools, &RolloutConfig::default()), || {
            format!("{} does not replay", r.sample_id)
        })?;
        n += 1;
    }
    ensure(n > 0, || "no accepted records".into())
}

// 8. Search-penalty ablation.
fn ablation() -> Outcome {
    let world = World::standard();
    let cfg = AblationConfig::default();
    let default = RewardConfig::default();
    let no_penalty = RewardConfig {
        lambda_search: 0.0,
        ..default
    };
    let mut lines = Vec::new();
    for seed in 0..5 {
        let off = train(&world, &no_penalty, &cfg, seed, Exec::default()).map_err(|e| e.to_string())?;
        let on = train(&world, &default, &cfg, seed, Exec::default()).map_err(|e| e.to_string())?;
        let (a, b) = (off.tail_ratio(10), on.tail_ratio(10));
        lines.push(format!("seed {seed}: {a:.3} vs {b:.3}"));
        ensure(a >= b, || format!("seed {seed}: λ_search=0 ratio {a:.3} < default {b:.3}"))?;
    }
    println!("    search ratio, λ_search=0 vs default: {}", lines.join("; "));
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("reward exactness", reward_exactness, Duration::from_secs(1)),
        ("tag oracle equivalence", tag_oracle, Duration::from_secs(1)),
        ("metric oracle equivalence", metric_oracle, Duration::from_secs(30)),
        ("GRPO properties", grpo_properties, Duration::from_secs(5)),
        ("rollout termination and protocol", protocol_and_termination, Duration::from_secs(60)),
        ("tool gateway", gateway, Duration::from_secs(10)),
        ("end-to-end golden pipeline", golden_pipeline, Duration::from_secs(120)),
        ("search-penalty ablation", ablation, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|()| {
            ensure(elapsed <= *budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
        });
        match result {
            Ok(()) => println!("PASS criterion {}: {name} ({elapsed:.2?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({elapsed:.2?}): {e}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
