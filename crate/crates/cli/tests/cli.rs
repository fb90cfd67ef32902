use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/synthetic")
}

fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmner-agent"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    bin(args).status.code().expect("exit code")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).display().to_string()
}

const OUTPUTS: &[&str] = &[
    "tags/tags.jsonl",
    "tags/cold_start.jsonl",
    "tags/rl_pool.jsonl",
    "secot/secot.jsonl",
    "secot/sft_gold.jsonl",
    "secot/secot_stats.md",
    "roll/rollouts.jsonl",
    "roll/rewarded.jsonl",
    "roll/batch.jsonl",
    "eval.md",
];

fn pipeline(dir: &Path, extra: &[&str]) {
    let corpus = fx("corpus.jsonl");
    let index = format!("local:{}", fx("index.jsonl"));
    let with = |args: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(extra);
        ok(&v);
    };
    with(&[
        "tag-gen",
        "--corpus",
        &corpus,
        "--policy",
        &format!("scripted:{}", fx("probe.jsonl")),
        "--n",
        "4",
        "--out-dir",
        &p(dir, "tags"),
    ]);
    with(&[
        "secot-build",
        "--corpus",
        &corpus,
        "--tags",
        &p(dir, "tags/tags.jsonl"),
        "--teacher",
        &format!("scripted:{}", fx("teacher.jsonl")),
        "--tools",
        &index,
        "--out-dir",
        &p(dir, "secot"),
    ]);
    with(&[
        "rollout",
        "--corpus",
        &corpus,
        "--ids",
        &p(dir, "tags/rl_pool.jsonl"),
        "--policy",
        &format!("scripted:{}", fx("policy.jsonl")),
        "--tools",
        &index,
        "--group-size",
        "8",
        "--out",
        &p(dir, "roll/rollouts.jsonl"),
    ]);
    with(&[
        "reward",
        "--rollouts",
        &p(dir, "roll/rollouts.jsonl"),
        "--gold",
        &corpus,
        "--out",
        &p(dir, "roll/rewarded.jsonl"),
    ]);
    with(&[
        "grpo-batch",
        "--rewarded",
        &p(dir, "roll/rewarded.jsonl"),
        "--out",
        &p(dir, "roll/batch.jsonl"),
    ]);
    with(&[
        "eval",
        "--pred",
        &p(dir, "roll/rollouts.jsonl"),
        "--gold",
        &corpus,
        "--train",
        &p(dir, "secot/sft_gold.jsonl"),
        "--out",
        &p(dir, "eval.md"),
    ]);
}

#[test]
fn end_to_end_pipeline_is_byte_identical_across_runs_and_executors() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    pipeline(a.path(), &["--seed", "11"]);
    pipeline(b.path(), &["--seed", "11"]);
    pipeline(c.path(), &["--seed", "11", "--sequential"]);
    for f in OUTPUTS {
        let x = read(&a.path().join(f));
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, read(&b.path().join(f)), "{f} differs between runs");
        assert_eq!(x, read(&c.path().join(f)), "{f} differs under --sequential");
    }
    assert_eq!(read(&a.path().join("tags/rl_pool.jsonl")).lines().count(), 7);
    assert_eq!(read(&a.path().join("secot/sft_gold.jsonl")).lines().count(), 13);
    assert_eq!(read(&a.path().join("roll/batch.jsonl")).lines().count(), 56);
    let table = read(&a.path().join("eval.md"));
    for row in ["| seen |", "| unseen |", "| all |"] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
    for f in ["tags/tag-gen", "secot/secot-build", "roll/rollout", "roll/reward", "roll/grpo-batch", "eval"] {
        assert!(a.path().join(format!("{f}.config.toml")).exists(), "no echo for {f}");
    }
}

fn rollout_args<'a>(corpus: &'a str, policy: &'a str, tools: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["rollout", "--corpus", corpus, "--policy", policy, "--tools", tools, "--out", out]
}

#[test]
fn rollouts_depend_only_on_the_seed() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, policy, tools) = (
        fx("corpus.jsonl"),
        format!("scripted:{}", fx("policy.jsonl")),
        format!("local:{}", fx("index.jsonl")),
    );
    let run = |name: &str, seed: &str| {
        let out = p(d.path(), name);
        let mut args = rollout_args(&corpus, &policy, &tools, &out);
        args.extend(["--seed", seed, "--group-size", "4"]);
        ok(&args);
        read(Path::new(&out))
    };
    let a = run("a/r.jsonl", "3");
    assert_eq!(a, run("b/r.jsonl", "3"));
    assert_ne!(a, run("c/r.jsonl", "4"));
    assert_eq!(a.lines().count(), 80);
}

#[test]
fn config_echo_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, policy, tools) = (
        fx("corpus.jsonl"),
        format!("scripted:{}", fx("policy.jsonl")),
        format!("local:{}", fx("index.jsonl")),
    );
    let first = p(d.path(), "first/r.jsonl");
    let mut args = rollout_args(&corpus, &policy, &tools, &first);
    args.extend(["--seed", "21", "--group-size", "3", "--m", "2"]);
    ok(&args);
    let echo = p(d.path(), "first/rollout.config.toml");
    let text = read(Path::new(&echo));
    assert!(text.starts_with("# gmner-agent rollout"));
    assert!(text.contains("seed = 21"));

    // The echo names the output file, so move the first result aside.
    let kept = p(d.path(), "kept.jsonl");
    std::fs::rename(&first, &kept).unwrap();
    ok(&["rollout", "--config", &echo]);
    assert_eq!(read(Path::new(&kept)), read(Path::new(&first)));
}

#[test]
fn eval_echo_keeps_task_and_format() {
    let d = tempfile::tempdir().unwrap();
    let corpus = fx("corpus.jsonl");
    let pred = perfect_predictions(d.path());
    let out = p(d.path(), "e/scores.csv");
    ok(&["eval", "--pred", &pred, "--gold", &corpus, "--task", "mner", "--format", "csv", "--out", &out]);
    let first = read(Path::new(&out));
    assert!(first.starts_with("Split,N,MNER Pre."), "{first}");
    std::fs::remove_file(&out).unwrap();
    ok(&["eval", "--config", &p(d.path(), "e/eval.config.toml")]);
    assert_eq!(first, read(Path::new(&out)));
}

#[test]
fn single_mode_emits_one_trajectory_per_post() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "r.jsonl");
    let (corpus, policy, tools) = (
        fx("corpus.jsonl"),
        format!("scripted:{}", fx("policy.jsonl")),
        format!("local:{}", fx("index.jsonl")),
    );
    let mut args = rollout_args(&corpus, &policy, &tools, &out);
    args.push("--single");
    ok(&args);
    let ids: Vec<serde_json::Value> = read(Path::new(&out))
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].clone())
        .collect();
    assert_eq!(ids.len(), 20);
    assert_eq!(ids[0], "post-00");
}

/// Turns gold samples into prediction records that copy the first box.
fn perfect_predictions(dir: &Path) -> String {
    let lines: Vec<String> = read(&fixtures().join("corpus.jsonl"))
        .lines()
        .map(|l| {
            let g: serde_json::Value = serde_json::from_str(l).unwrap();
            let entities: Vec<serde_json::Value> = g["entities"]
                .as_array()
                .unwrap()
                .iter()
                .map(|e| serde_json::json!({"span": e["span"], "type": e["type"], "box": e["boxes"].get(0)}))
                .collect();
            serde_json::json!({"id": g["id"], "entities": entities}).to_string()
        })
        .collect();
    let path = p(dir, "pred.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn eval_prints_precision_recall_f1() {
    let d = tempfile::tempdir().unwrap();
    let corpus = fx("corpus.jsonl");
    let pred = perfect_predictions(d.path());
    let out = ok(&["eval", "--pred", &pred, "--gold", &corpus, "--task", "gmner"]);
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("GMNER Pre. | GMNER Rec. | GMNER F1"), "{s}");
    assert!(s.contains("| all | 20 | 100.00 | 100.00 | 100.00 | - |"), "{s}");

    let out = ok(&["eval", "--pred", &pred, "--gold", &corpus, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["all"]["n_samples"], 20);
    assert_eq!(v["all"]["scores"]["gmner"]["f1"], 1.0);
}

#[test]
fn exit_codes_separate_config_upstream_and_validation() {
    let d = tempfile::tempdir().unwrap();
    let corpus = fx("corpus.jsonl");
    let tools = format!("local:{}", fx("index.jsonl"));
    let out = p(d.path(), "r.jsonl");

    // configuration
    let bad_cfg = p(d.path(), "bad.toml");
    std::fs::write(&bad_cfg, "[rollout]\nmax_actions = \"three\"\n").unwrap();
    assert_eq!(code(&["eval", "--config", &bad_cfg, "--pred", &corpus, "--gold", &corpus]), 2);
    assert_eq!(code(&["eval", "--pred", &p(d.path(), "missing.jsonl"), "--gold", &corpus]), 2);
    assert_eq!(code(&rollout_args(&corpus, "bogus:x", &tools, &out)), 2);
    assert_eq!(code(&["rollout", "--corpus", &corpus, "--tools", &tools, "--out", &out]), 2);

    // upstream
    let remote = "remote:http://127.0.0.1:9/v1/generate";
    assert_eq!(code(&rollout_args(&corpus, remote, &tools, &out)), 3);
    let dead_tools = "http://127.0.0.1:9";
    let policy = format!("scripted:{}", fx("policy.jsonl"));
    assert_eq!(code(&rollout_args(&corpus, &policy, dead_tools, &out)), 3);

    // validation
    let junk = p(d.path(), "junk.jsonl");
    std::fs::write(&junk, "{not json}\n").unwrap();
    assert_eq!(code(&["eval", "--pred", &junk, "--gold", &corpus]), 4);
    let orphan = p(d.path(), "orphan.jsonl");
    std::fs::write(&orphan, "{\"id\":\"nope\",\"entities\":[]}\n").unwrap();
    assert_eq!(code(&["eval", "--pred", &orphan, "--gold", &corpus]), 4);
    ok(&rollout_args(&corpus, &policy, &tools, &out));
    let one_gold = p(d.path(), "one.jsonl");
    std::fs::write(&one_gold, read(Path::new(&corpus)).lines().next().unwrap().to_string() + "\n").unwrap();
    assert_eq!(code(&["reward", "--rollouts", &out, "--gold", &one_gold, "--out", &p(d.path(), "w.jsonl")]), 4);
}
