//! A stub completion endpoint backed by the scripted policy must produce the
//! same trajectories over HTTP as the scripted policy in process.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use gmner_agent::policy::{GenerateRequest, Policy, RemotePolicy, RemoteRequest, RemoteResponse, ScriptedPolicy};
use gmner_agent::rollout::{run_group, PostInput, PromptTemplate, RolloutConfig};
use gmner_agent::synthetic::World;
use gmner_agent::toolgw::{Gateway, LocalIndex};
use gmner_agent::Exec;

async fn complete(State(p): State<Arc<ScriptedPolicy>>, Json(req): Json<RemoteRequest>) -> Json<RemoteResponse> {
    let stop: Vec<&str> = req.stop.iter().map(String::as_str).collect();
    let g = p
        .generate(&GenerateRequest {
            trajectory_id: &req.trajectory_id,
            turn_index: req.turn_index,
            seed: req.seed,
            history: &req.history,
            images: &req.images,
            stop: &stop,
        })
        .expect("scripted turn");
    // Run on past the stop tag, as endpoints ignoring stop sequences do; the client must truncate.
    let text = if stop.iter().any(|s| g.text.ends_with(s)) {
        format!("{}\n<reason>extra</reason>", g.text)
    } else {
        g.text
    };
    Json(RemoteResponse { text, token_count: None })
}

fn serve(policy: ScriptedPolicy) -> (String, tokio::runtime::Runtime) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/v1/generate", post(complete))
        .with_state(Arc::new(policy));
    rt.spawn(async move { axum::serve(listener, app).await });
    (format!("http://{addr}/v1/generate"), rt)
}

#[test]
fn remote_stub_matches_scripted_byte_for_byte() {
    let world = World::standard();
    let scripted = ScriptedPolicy::from_entries(world.policy_fixture());
    let (url, _rt) = serve(scripted.clone());
    let remote = RemotePolicy::new(url, "stub", Duration::from_secs(10)).with_token(None);
    let tools = Gateway::local(LocalIndex::new(world.index_docs()));
    let cfg = RolloutConfig::default();
    let template = PromptTemplate::default();
    for s in world.corpus().iter().take(6) {
        let input = PostInput::from(s);
        let prompt = template.render(&input, "");
        let a = run_group(&input, &prompt, &scripted, &tools, &cfg, 8, 11, Exec::Sequential).unwrap();
        let b = run_group(&input, &prompt, &remote, &tools, &cfg, 8, 11, Exec::Sequential).unwrap();
        let ser = |t: &Vec<_>| gmner_agent::jsonl::to_string(t);
        assert_eq!(ser(&a), ser(&b));
    }
}

#[test]
fn endpoint_errors_surface_as_policy_errors() {
    let remote = RemotePolicy::new("http://127.0.0.1:9/v1/generate", "stub", Duration::from_secs(2));
    let err = remote
        .generate(&GenerateRequest {
            trajectory_id: "x",
            turn_index: 0,
            seed: 0,
            history: "prompt",
            images: &[],
            stop: &[],
        })
        .unwrap_err();
    assert!(matches!(err, gmner_agent::policy::PolicyError::Endpoint { .. }), "{err:?}");
}
