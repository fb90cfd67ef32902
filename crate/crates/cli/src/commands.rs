use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gmner_agent::config::{RunConfig, TableFormat};
use gmner_agent::exec::seed_for_key;
use gmner_agent::grpo::{emit_all, write_batch};
use gmner_agent::jsonl;
use gmner_agent::metrics::{
    csv_table, markdown_table, search_ratio, seen_unseen_split, EvalSample, GoldSample, PredEntity, PredictionRecord,
    SplitScores, Task, TaskScores, UnseenCriterion,
};
use gmner_agent::policy::{PolicyHandle, PolicySpec};
use gmner_agent::reward::{compute_reward, RewardedTrajectory};
use gmner_agent::rollout::{run_group, run_rollout, PostInput, RolloutRequest, Trajectory, TrajectoryStatus};
use gmner_agent::secot::{check_accepted, filter_pool, SecotRecord, SecotStats, Synthesis, Verdict};
use gmner_agent::tagger::{SearchTagReport, TagRun};
use gmner_agent::toolgw::backend::ExternalEngine;
use gmner_agent::toolgw::http::run_foreground;
use gmner_agent::toolgw::{backend, Gateway, LocalIndex, SearchCache, ToolSpec, Tools};
use gmner_agent::Exec;

use crate::error::{CliError, Result};
use crate::{Cli, Command, Format, TaskArg, UnseenArg};

struct Ctx {
    cfg: RunConfig,
    exec: Exec,
    argv: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let mut ctx = Ctx {
        cfg,
        exec,
        argv: std::env::args().skip(1).collect(),
    };
    match cli.command {
        Command::ServeTools(a) => serve_tools(&mut ctx, a),
        Command::Rollout(a) => rollout(&mut ctx, a),
        Command::TagGen(a) => tag_gen(&mut ctx, a),
        Command::SecotBuild(a) => secot_build(&mut ctx, a),
        Command::Reward(a) => reward(&mut ctx, a),
        Command::GrpoBatch(a) => grpo_batch(&mut ctx, a),
        Command::Eval(a) => eval(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn required(v: &Option<String>, what: &str) -> Result<String> {
    v.clone()
        .ok_or_else(|| CliError::config(format!("no {what} given (flag or [endpoints] in the config)")))
}

fn need(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| CliError::config(format!("no --{flag} given (flag or [paths] in the config)")))
}

fn out_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    create_dir(out_dir(path))?;
    std::fs::write(path, body).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    create_dir(out_dir(path))?;
    Ok(jsonl::write(path, records)?)
}

/// Writes the resolved configuration as `<command>.config.toml` in `dir`.
fn echo_config(ctx: &Ctx, dir: &Path, command: &str) -> Result<()> {
    let body = format!("# gmner-agent {}\n{}", ctx.argv.join(" "), ctx.cfg.to_toml());
    write_text(&dir.join(format!("{command}.config.toml")), &body)
}

fn validated(ctx: &Ctx) -> Result<()> {
    Ok(ctx.cfg.validate()?)
}

fn open_policy(ctx: &Ctx, spec: &str) -> Result<PolicyHandle> {
    let spec = PolicySpec::parse(spec)?;
    let mut handle = PolicyHandle::open(&spec, &ctx.cfg.endpoints.model, ctx.cfg.timeout())?;
    if let PolicyHandle::Remote(p) = &mut handle {
        p.temperature = ctx.cfg.tagger.temperature;
        p.max_tokens = ctx.cfg.rollout.max_response_tokens;
    }
    Ok(handle)
}

fn cache(ctx: &Ctx) -> Result<SearchCache> {
    let threshold = ctx.cfg.tools.cache_threshold;
    match &ctx.cfg.tools.cache_path {
        Some(p) => SearchCache::persistent(p, threshold).map_err(CliError::config),
        None => Ok(SearchCache::in_memory(threshold)),
    }
}

fn open_tools(ctx: &Ctx, spec: &str) -> Result<Arc<dyn Tools>> {
    let spec = ToolSpec::parse(spec).map_err(CliError::config)?;
    Ok(spec.open(cache(ctx)?, ctx.cfg.tools.k_results, ctx.cfg.timeout())?)
}

fn read_corpus(path: &Path) -> Result<Vec<GoldSample>> {
    let corpus: Vec<GoldSample> = jsonl::read(path)?;
    let mut seen = HashSet::new();
    for s in &corpus {
        if !seen.insert(s.id.as_str()) {
            return Err(CliError::validation(format!("{}: duplicate sample id {:?}", path.display(), s.id)));
        }
    }
    Ok(corpus)
}

fn serve_tools(ctx: &mut Ctx, a: crate::ServeTools) -> Result<()> {
    set(&mut ctx.cfg.endpoints.tools, a.tools.map(Some));
    set(&mut ctx.cfg.tools.cache_path, a.cache.map(Some));
    set(&mut ctx.cfg.tools.k_results, a.k);
    validated(ctx)?;
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let spec = ToolSpec::parse(&required(&ctx.cfg.endpoints.tools, "tools")?).map_err(CliError::config)?;
    let backend: Arc<dyn backend::SearchBackend> = match spec {
        ToolSpec::Local(p) => Arc::new(LocalIndex::load(&p).map_err(CliError::config)?),
        ToolSpec::External(adapter) => {
            let url = std::env::var(backend::ENV_SEARCH_URL)
                .map_err(|_| CliError::config(format!("{} is not set", backend::ENV_SEARCH_URL)))?;
            Arc::new(ExternalEngine::new(adapter, url, ctx.cfg.timeout()))
        }
        ToolSpec::Http(_) => return Err(CliError::config("serve-tools needs a local or external backend")),
    };
    let gw = Gateway::new(backend, cache(ctx)?, ctx.cfg.tools.k_results);
    tracing::info!(config = %ctx.cfg.to_toml(), "resolved config");
    Ok(run_foreground(&a.addr, Arc::new(gw))?)
}

fn select_ids(corpus: Vec<GoldSample>, ids: Option<&Path>) -> Result<Vec<GoldSample>> {
    let Some(path) = ids else {
        return Ok(corpus);
    };
    let lines: Vec<serde_json::Value> = jsonl::read(path)?;
    let wanted: Vec<String> = lines
        .iter()
        .map(|v| {
            v.get("id")
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| CliError::validation(format!("{}: line without a string \"id\"", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut by_id: HashMap<String, GoldSample> = corpus.into_iter().map(|s| (s.id.clone(), s)).collect();
    wanted
        .iter()
        .map(|id| {
            by_id
                .remove(id)
                .ok_or_else(|| CliError::validation(format!("id {id:?} is not in the corpus (or listed twice)")))
        })
        .collect()
}

fn rollout(ctx: &mut Ctx, a: crate::Rollout) -> Result<()> {
    set(&mut ctx.cfg.endpoints.policy, a.policy.map(Some));
    set(&mut ctx.cfg.endpoints.tools, a.tools.map(Some));
    set(&mut ctx.cfg.rollout.max_actions, a.m);
    set(&mut ctx.cfg.rollout.max_invalid_retries, a.max_invalid_retries);
    set(&mut ctx.cfg.rollout.group_size, a.group_size);
    set(&mut ctx.cfg.rollout.instruction, a.instruction);
    let paths = &mut ctx.cfg.paths;
    set(&mut paths.corpus, a.corpus.map(Some));
    set(&mut paths.ids, a.ids.map(Some));
    set(&mut paths.out, a.out.map(Some));
    validated(ctx)?;
    let (corpus_path, out) = (need(&ctx.cfg.paths.corpus, "corpus")?, need(&ctx.cfg.paths.out, "out")?);
    let policy = open_policy(ctx, &required(&ctx.cfg.endpoints.policy, "policy")?)?;
    let tools = open_tools(ctx, &required(&ctx.cfg.endpoints.tools, "tools")?)?;
    let template = ctx.cfg.prompt_template()?;
    let corpus = select_ids(read_corpus(&corpus_path)?, ctx.cfg.paths.ids.as_deref())?;
    let instruction = &ctx.cfg.rollout.instruction;
    let rcfg = ctx.cfg.rollout.config();
    let (seed, g) = (ctx.cfg.seed, ctx.cfg.rollout.group_size);
    let per_post = ctx.exec.try_map(&corpus, |s| {
        let input = PostInput::from(s);
        let prompt = template.render(&input, instruction);
        let seed = seed_for_key(seed, &s.id);
        if a.single {
            let req = RolloutRequest {
                trajectory_id: &s.id,
                input: &input,
                prompt: &prompt,
                seed,
            };
            run_rollout(req, &policy, &tools, &rcfg).map(|t| vec![t])
        } else {
            run_group(&input, &prompt, &policy, &tools, &rcfg, g, seed, Exec::Sequential)
        }
    })?;
    let trajs: Vec<Trajectory> = per_post.into_iter().flatten().collect();
    write_jsonl(&out, &trajs)?;
    echo_config(ctx, out_dir(&out), "rollout")
}

fn tag_gen(ctx: &mut Ctx, a: crate::TagGen) -> Result<()> {
    set(&mut ctx.cfg.endpoints.policy, a.policy.map(Some));
    set(&mut ctx.cfg.tagger.n_samples, a.n);
    set(&mut ctx.cfg.tagger.iou_threshold, a.iou_threshold);
    set(&mut ctx.cfg.paths.corpus, a.corpus.map(Some));
    set(&mut ctx.cfg.paths.out_dir, a.out_dir.map(Some));
    validated(ctx)?;
    let dir = need(&ctx.cfg.paths.out_dir, "out-dir")?;
    let policy = open_policy(ctx, &required(&ctx.cfg.endpoints.policy, "policy")?)?;
    let template = ctx.cfg.prompt_template()?;
    let corpus = read_corpus(&need(&ctx.cfg.paths.corpus, "corpus")?)?;
    let out = TagRun {
        policy: &policy,
        template: &template,
        instruction: &ctx.cfg.tagger.instruction,
        n: ctx.cfg.tagger.n_samples,
        seed: ctx.cfg.seed,
        iou_threshold: ctx.cfg.tagger.iou_threshold,
    }
    .run(ctx.exec, &corpus)?;
    write_jsonl(&dir.join("tags.jsonl"), &out.reports)?;
    write_jsonl(&dir.join("cold_start.jsonl"), &out.cold_start)?;
    write_jsonl(&dir.join("rl_pool.jsonl"), &out.rl_pool)?;
    echo_config(ctx, &dir, "tag-gen")
}

fn secot_build(ctx: &mut Ctx, a: crate::SecotBuild) -> Result<()> {
    set(&mut ctx.cfg.endpoints.teacher, a.teacher.map(Some));
    set(&mut ctx.cfg.endpoints.tools, a.tools.map(Some));
    set(&mut ctx.cfg.secot.resample, a.resample);
    let paths = &mut ctx.cfg.paths;
    set(&mut paths.corpus, a.corpus.map(Some));
    set(&mut paths.tags, a.tags.map(Some));
    set(&mut paths.out_dir, a.out_dir.map(Some));
    validated(ctx)?;
    let dir = need(&ctx.cfg.paths.out_dir, "out-dir")?;
    let teacher = open_policy(ctx, &required(&ctx.cfg.endpoints.teacher, "teacher")?)?;
    let tools = open_tools(ctx, &required(&ctx.cfg.endpoints.tools, "tools")?)?;
    let template = ctx.cfg.prompt_template()?;
    let corpus = read_corpus(&need(&ctx.cfg.paths.corpus, "corpus")?)?;
    let reports: Vec<SearchTagReport> = jsonl::read(need(&ctx.cfg.paths.tags, "tags")?)?;
    let known: HashSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
    if let Some(r) = reports.iter().find(|r| !known.contains(r.sample_id.as_str())) {
        return Err(CliError::validation(format!("tag report for unknown sample {:?}", r.sample_id)));
    }
    let pool = filter_pool(&reports);
    let records = Synthesis {
        teacher: &teacher,
        tools: &*tools,
        rollout: ctx.cfg.rollout.config(),
        template: &template,
        seed: ctx.cfg.seed,
    }
    .build(ctx.exec, &corpus, &pool, ctx.cfg.secot.resample, None);
    // Upstream failures are recorded per sample; fail only if nothing got through.
    if !records.is_empty()
        && records.iter().all(|r| {
            matches!(&r.verdict, Verdict::Rejected(gmner_agent::secot::RejectReason::Infrastructure { .. }))
        })
    {
        return Err(CliError::upstream("every synthesis attempt failed on the teacher or tools"));
    }
    for r in records.iter().filter(|r| r.verdict == Verdict::Accepted) {
        check_accepted(r).map_err(|e| CliError::validation(format!("{}: {e}", r.sample_id)))?;
    }
    let by_id: HashMap<&str, &GoldSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let sft_gold: Vec<&GoldSample> = records
        .iter()
        .filter(|r| r.verdict == Verdict::Accepted)
        .map(|r| by_id[r.sample_id.as_str()])
        .collect();
    write_jsonl(&dir.join("secot.jsonl"), &records)?;
    write_jsonl(&dir.join("sft_gold.jsonl"), &sft_gold)?;
    write_text(&dir.join("secot_stats.md"), &SecotStats::of(&records).markdown())?;
    echo_config(ctx, &dir, "secot-build")
}

fn reward(ctx: &mut Ctx, a: crate::Reward) -> Result<()> {
    set(&mut ctx.cfg.reward.gamma, a.gamma);
    set(&mut ctx.cfg.reward.lambda_search, a.lambda_search);
    let paths = &mut ctx.cfg.paths;
    set(&mut paths.rollouts, a.rollouts.map(Some));
    set(&mut paths.gold, a.gold.map(Some));
    set(&mut paths.out, a.out.map(Some));
    validated(ctx)?;
    let out = need(&ctx.cfg.paths.out, "out")?;
    let trajs: Vec<Trajectory> = jsonl::read(need(&ctx.cfg.paths.rollouts, "rollouts")?)?;
    let corpus = read_corpus(&need(&ctx.cfg.paths.gold, "gold")?)?;
    let by_id: HashMap<&str, &GoldSample> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    let cfg = ctx.cfg.reward;
    let rewarded = ctx.exec.try_map(&trajs, |t| {
        t.check().map_err(|e| CliError::validation(format!("trajectory {}: {e}", t.id)))?;
        let gold = by_id
            .get(t.input.id.as_str())
            .ok_or_else(|| CliError::validation(format!("no gold for {:?}", t.input.id)))?;
        Ok::<_, CliError>(RewardedTrajectory {
            trajectory: t.clone(),
            reward: compute_reward(t, &gold.entities, &cfg),
        })
    })?;
    write_jsonl(&out, &rewarded)?;
    echo_config(ctx, out_dir(&out), "reward")
}

fn grpo_batch(ctx: &mut Ctx, a: crate::GrpoBatch) -> Result<()> {
    set(&mut ctx.cfg.paths.rewarded, a.rewarded.map(Some));
    set(&mut ctx.cfg.paths.out, a.out.map(Some));
    validated(ctx)?;
    let out = need(&ctx.cfg.paths.out, "out")?;
    let rewarded: Vec<RewardedTrajectory> = jsonl::read(need(&ctx.cfg.paths.rewarded, "rewarded")?)?;
    let batch = emit_all(ctx.exec, &rewarded)?;
    create_dir(out_dir(&out))?;
    write_batch(&out, &batch)?;
    echo_config(ctx, out_dir(&out), "grpo-batch")
}

struct Prediction {
    id: String,
    entities: Vec<PredEntity>,
    n_tool_calls: Option<usize>,
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let lines: Vec<serde_json::Value> = jsonl::read(path)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let bad = |e: serde_json::Error| CliError::validation(format!("{}:{}: {e}", path.display(), i + 1));
            if v.get("turns").is_some() {
                let t: Trajectory = serde_json::from_value(v).map_err(bad)?;
                Ok(Prediction {
                    id: t.input.id,
                    entities: t.final_answer.map(|f| f.entities).unwrap_or_default(),
                    n_tool_calls: Some(t.n_tool_calls),
                })
            } else {
                let r: PredictionRecord = serde_json::from_value(v).map_err(bad)?;
                Ok(Prediction {
                    id: r.id,
                    entities: r.entities,
                    n_tool_calls: None,
                })
            }
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn single_task_table(named: &[(&str, &SplitScores)], task: Task, csv: bool) -> String {
    let label = task.label();
    let header = [
        "Split".to_string(),
        "N".to_string(),
        format!("{label} Pre."),
        format!("{label} Rec."),
        format!("{label} F1"),
        "SR".to_string(),
    ];
    let rows: Vec<Vec<String>> = named
        .iter()
        .map(|(name, s)| {
            let r = s.scores.get(task);
            vec![
                name.to_string(),
                s.n_samples.to_string(),
                pct(r.precision),
                pct(r.recall),
                pct(r.f1),
                s.search_ratio.map(pct).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let mut out = String::new();
    if csv {
        let _ = writeln!(out, "{}", header.join(","));
        for r in rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
    } else {
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for r in rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
    }
    out
}

fn eval(ctx: &mut Ctx, a: crate::Eval) -> Result<()> {
    let ev = &mut ctx.cfg.eval;
    match a.task {
        Some(TaskArg::Gmner) => ev.task = Some(Task::Gmner),
        Some(TaskArg::Mner) => ev.task = Some(Task::Mner),
        Some(TaskArg::Eeg) => ev.task = Some(Task::Eeg),
        Some(TaskArg::All) => ev.task = None,
        None => {}
    }
    set(
        &mut ev.unseen,
        a.unseen.map(|u| match u {
            UnseenArg::Mention => UnseenCriterion::Mention,
            UnseenArg::MentionType => UnseenCriterion::MentionType,
            UnseenArg::MentionGrounding => UnseenCriterion::MentionGrounding,
        }),
    );
    set(
        &mut ev.format,
        a.format.map(|f| match f {
            Format::Md => TableFormat::Md,
            Format::Csv => TableFormat::Csv,
            Format::Json => TableFormat::Json,
        }),
    );
    let paths = &mut ctx.cfg.paths;
    set(&mut paths.pred, a.pred.map(Some));
    set(&mut paths.gold, a.gold.map(Some));
    set(&mut paths.train, a.train.map(Some));
    set(&mut paths.out, a.out.map(Some));
    validated(ctx)?;
    let preds = read_predictions(&need(&ctx.cfg.paths.pred, "pred")?)?;
    let gold = read_corpus(&need(&ctx.cfg.paths.gold, "gold")?)?;
    let by_id: HashMap<&str, &GoldSample> = gold.iter().map(|s| (s.id.as_str(), s)).collect();
    let samples: Vec<EvalSample<'_>> = preds
        .iter()
        .map(|p| {
            let g = by_id
                .get(p.id.as_str())
                .ok_or_else(|| CliError::validation(format!("prediction for unknown sample {:?}", p.id)))?;
            Ok(EvalSample {
                preds: &p.entities,
                golds: &g.entities,
                n_tool_calls: p.n_tool_calls,
            })
        })
        .collect::<Result<_>>()?;
    let named: Vec<(&str, SplitScores)> = match &ctx.cfg.paths.train {
        Some(path) => {
            let train = read_corpus(path)?;
            let r = seen_unseen_split(ctx.exec, &samples, &train, ctx.cfg.eval.unseen)?;
            vec![("seen", r.seen), ("unseen", r.unseen), ("all", r.all)]
        }
        None => {
            let sr = (!samples.is_empty() && samples.iter().all(|s| s.n_tool_calls.is_some()))
                .then(|| search_ratio(samples.iter().filter_map(|s| s.n_tool_calls)));
            vec![(
                "all",
                SplitScores {
                    n_samples: samples.len(),
                    scores: TaskScores::compute(ctx.exec, &samples),
                    search_ratio: sr,
                },
            )]
        }
    };
    let refs: Vec<(&str, &SplitScores)> = named.iter().map(|(n, s)| (*n, s)).collect();
    let body = match (ctx.cfg.eval.format, ctx.cfg.eval.task) {
        (TableFormat::Json, _) => {
            let map: BTreeMap<&str, &SplitScores> = refs.iter().copied().collect();
            serde_json::to_string_pretty(&map).expect("scores serialize") + "\n"
        }
        (TableFormat::Md, None) => markdown_table(&refs),
        (TableFormat::Csv, None) => csv_table(&refs),
        (f, Some(t)) => single_task_table(&refs, t, f == TableFormat::Csv),
    };
    match &ctx.cfg.paths.out {
        Some(path) => {
            write_text(path, &body)?;
            echo_config(ctx, out_dir(path), "eval")
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn rollout_summary(trajs: &[Trajectory], rewards: Option<&[f64]>) -> String {
    let mut out = String::from("## Rollouts\n\n| | Value |\n|---|---|\n");
    let n = trajs.len();
    let mut status: BTreeMap<&str, usize> = BTreeMap::new();
    for t in trajs {
        let s = match t.status {
            TrajectoryStatus::Answered => "answered",
            TrajectoryStatus::BudgetExhausted => "budget_exhausted",
            TrajectoryStatus::Invalid => "invalid",
        };
        *status.entry(s).or_default() += 1;
    }
    let _ = writeln!(out, "| Trajectories | {n} |");
    for (k, v) in &status {
        let _ = writeln!(out, "| Status {k} | {v} |");
    }
    if n > 0 {
        let sr = search_ratio(trajs.iter().map(|t| t.n_tool_calls));
        let turns = trajs.iter().map(|t| t.turns.len()).sum::<usize>() as f64 / n as f64;
        let calls = trajs.iter().map(|t| t.n_tool_calls).sum::<usize>() as f64 / n as f64;
        let fmt = trajs.iter().filter(|t| t.format_ok()).count() as f64 / n as f64;
        let _ = writeln!(out, "| Search ratio | {} |", pct(sr));
        let _ = writeln!(out, "| Mean turns | {turns:.2} |");
        let _ = writeln!(out, "| Mean tool calls | {calls:.2} |");
        let _ = writeln!(out, "| Format ok | {} |", pct(fmt));
        if let Some(r) = rewards {
            let _ = writeln!(out, "| Mean reward | {:.4} |", r.iter().sum::<f64>() / n as f64);
        }
    }
    out
}

fn report(ctx: &mut Ctx, a: crate::Report) -> Result<()> {
    let paths = &mut ctx.cfg.paths;
    set(&mut paths.secot, a.secot.map(Some));
    set(&mut paths.rollouts, a.rollouts.map(Some));
    set(&mut paths.out, a.out.map(Some));
    validated(ctx)?;
    let paths = &ctx.cfg.paths;
    if paths.secot.is_none() && paths.rollouts.is_none() {
        return Err(CliError::config("report needs --secot and/or --rollouts"));
    }
    let mut body = String::new();
    if let Some(p) = &paths.secot {
        let records: Vec<SecotRecord> = jsonl::read(p)?;
        body.push_str(&SecotStats::of(&records).markdown());
    }
    if let Some(p) = &paths.rollouts {
        let lines: Vec<serde_json::Value> = jsonl::read(p)?;
        let rewarded = lines.iter().all(|v| v.get("reward").is_some()) && !lines.is_empty();
        let parse = |v: serde_json::Value| {
            serde_json::from_value::<RewardedTrajectory>(v).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))
        };
        if rewarded {
            let rs: Vec<RewardedTrajectory> = lines.into_iter().map(parse).collect::<Result<_>>()?;
            let totals: Vec<f64> = rs.iter().map(|r| r.reward.total).collect();
            let trajs: Vec<Trajectory> = rs.into_iter().map(|r| r.trajectory).collect();
            body.push_str(&rollout_summary(&trajs, Some(&totals)));
        } else {
            let trajs: Vec<Trajectory> = lines
                .into_iter()
                .map(|v| serde_json::from_value(v).map_err(|e| CliError::validation(format!("{}: {e}", p.display()))))
                .collect::<Result<_>>()?;
            body.push_str(&rollout_summary(&trajs, None));
        }
    }
    match &ctx.cfg.paths.out {
        Some(path) => {
            write_text(path, &body)?;
            echo_config(ctx, out_dir(path), "report")
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}
