use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use gmner_agent::protocol::{Modality, SearchQuery, SearchQuerySet};
use gmner_agent::rollout::{run_rollout, PostInput, RolloutConfig, RolloutRequest};
use gmner_agent::synthetic::World;
use gmner_agent::toolgw::backend::BackendError;
use gmner_agent::toolgw::http::{spawn, RemoteTools};
use gmner_agent::toolgw::{Gateway, LocalIndex, SearchBackend, SearchCache, SearchResult, Tools};
use gmner_agent::policy::ScriptedPolicy;

struct Slow {
    calls: AtomicUsize,
    n_results: usize,
}

impl SearchBackend for Slow {
    fn search(&self, query: &str, _: Modality, _: usize) -> Result<Vec<SearchResult>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(300));
        Ok((0..self.n_results)
            .map(|i| SearchResult::text(format!("{query} {i}"), "s", format!("https://e/{i}")))
            .collect())
    }

    fn id(&self) -> String {
        "slow".into()
    }
}

fn slow_gateway(n_results: usize) -> (Arc<Slow>, Arc<Gateway>) {
    let backend = Arc::new(Slow {
        calls: AtomicUsize::new(0),
        n_results,
    });
    let gw = Arc::new(Gateway::new(backend.clone(), SearchCache::in_memory(0.9), 3));
    (backend, gw)
}

#[test]
fn sixteen_concurrent_identical_misses_make_one_backend_call() {
    let (backend, gw) = slow_gateway(5);
    let svc = spawn("127.0.0.1:0", gw.clone()).unwrap();
    let url = svc.base_url();
    let barrier = Arc::new(Barrier::new(16));
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (url, barrier) = (url.clone(), barrier.clone());
            std::thread::spawn(move || {
                let client = RemoteTools::new(url, Duration::from_secs(30));
                barrier.wait();
                client
                    .search_batch(Modality::Text, &[SearchQuery::new("Mara Quell", "Mara Quell singer")])
                    .unwrap()
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    assert_eq!(gw.backend_calls(), 1);
    for r in &results {
        assert_eq!(r[0].results, results[0][0].results);
        assert!(r[0].results.len() <= 3);
    }
    svc.shutdown().unwrap();
}

#[test]
fn malformed_and_empty_requests_are_400() {
    let (backend, gw) = slow_gateway(1);
    let svc = spawn("127.0.0.1:0", gw).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let post = |path: &str, body: &str| {
        let mut r = agent
            .post(&format!("{}/{path}", svc.base_url()))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    };
    let (status, body) = post("text_search", "{not json");
    assert_eq!(status, 400);
    assert!(body.contains("malformed_request"), "{body}");
    let (status, body) = post("image_search", r#"{"queries":[]}"#);
    assert_eq!(status, 400);
    assert!(body.contains("invalid_request"), "{body}");
    let (status, _) = post("text_search", r#"{"queries":[{"entity":"x","q":"  "}]}"#);
    assert_eq!(status, 400);
    assert_eq!(backend.calls.load(Ordering::SeqCst), 0);

    let client = RemoteTools::new(svc.base_url(), Duration::from_secs(5));
    let err = client
        .execute(&SearchQuerySet {
            modality: Modality::Text,
            entries: vec![SearchQuery::new("x", " ")],
        })
        .unwrap_err();
    assert!(matches!(err, gmner_agent::toolgw::ToolError::Rejected(_)), "{err:?}");
}

#[test]
fn unreachable_service_is_unavailable() {
    let client = RemoteTools::new("http://127.0.0.1:9", Duration::from_secs(2));
    let err = client
        .search_batch(Modality::Text, &[SearchQuery::new("a", "a")])
        .unwrap_err();
    assert!(matches!(err, gmner_agent::toolgw::ToolError::Unavailable(_)), "{err:?}");
}

#[test]
fn rollouts_through_http_match_in_process() {
    let world = World::standard();
    let policy = ScriptedPolicy::from_entries(world.teacher_fixture());
    let local = Gateway::local(LocalIndex::new(world.index_docs()));
    let served = Arc::new(Gateway::local(LocalIndex::new(world.index_docs())));
    let svc = spawn("127.0.0.1:0", served).unwrap();
    let remote = RemoteTools::new(svc.base_url(), Duration::from_secs(10));
    let cfg = RolloutConfig::default();
    for s in world.corpus() {
        let input = PostInput::from(&s);
        let prompt = format!("Extract entities.\nText: {}", s.text);
        let req = RolloutRequest {
            trajectory_id: &s.id,
            input: &input,
            prompt: &prompt,
            seed: 3,
        };
        let a = run_rollout(req, &policy, &local, &cfg).unwrap();
        let b = run_rollout(req, &policy, &remote, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
