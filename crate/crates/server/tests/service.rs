use std::path::Path;
use std::sync::Arc;

use collabmem::audit::{AuditAction, AuditLog};
use collabmem::orchestration::{AgentBackend, AgentSpec, Document, ResourceBackend, ResourceSpec};
use collabmem::presets;
use collabmem::scenario::{plan, run_scenario, AccessSource, CorpusSource, ScenarioConfig};
use collabmem::verify::verify;
use collabmem::{Edge, MemoryStore, Principals};
use collabmem_server::client::{replay_plan, Client};
use collabmem_server::{AppState, ServiceOptions};
use serde_json::{json, Value};

/// A live server on an ephemeral port; dropped with the runtime.
struct Live {
    _rt: tokio::runtime::Runtime,
    client: Client,
}

fn start(state: AppState) -> Live {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(collabmem_server::serve(listener, Arc::new(state)));
    Live { _rt: rt, client: Client::new(format!("http://{addr}")) }
}

/// Two users, two agents, one corpus resource; nothing granted.
fn small_config() -> ScenarioConfig {
    let mut cfg = presets::fully_collaborative(0.0, 4, 3);
    cfg.users = vec!["u1".into(), "u2".into()];
    cfg.agents = vec![
        AgentSpec {
            id: "a1".into(),
            specialization: "botany".into(),
            topics: vec!["botany".into()],
            backend: AgentBackend::Scripted { resource: Some("r1".into()) },
        },
        AgentSpec {
            id: "a2".into(),
            specialization: "geology".into(),
            topics: vec!["geology".into()],
            backend: AgentBackend::Scripted { resource: None },
        },
    ];
    cfg.resources = vec![ResourceSpec {
        id: "r1".into(),
        kind: "kb".into(),
        schema: Value::Null,
        backend: ResourceBackend::Corpus { category: "botany".into() },
    }];
    cfg.agent_resources = [("a1".to_string(), vec!["r1".to_string()])].into_iter().collect();
    cfg.access = AccessSource::Static { user_agents: Default::default() };
    cfg.corpus = CorpusSource::Inline {
        documents: vec![Document {
            id: "d1".into(),
            category: "botany".into(),
            text: "The oak density is 0.75 grams per cubic centimetre.".into(),
        }],
        queries: vec![],
    };
    cfg
}

fn admin(live: &Live, path: &str, body: Value) -> (u16, Value) {
    let r = live.client.post(path, "admin", &body).unwrap();
    (r.status, r.body)
}

fn grant(live: &Live, edge: Edge) -> u16 {
    admin(live, "/permissions/grant", json!({ "edge": edge })).0
}

#[test]
fn duplicate_grant_conflicts_and_errors_carry_tick_and_code() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    assert_eq!(grant(&live, Edge::user_agent("u1", "a1")), 200);
    let (status, body) = admin(&live, "/permissions/grant", json!({ "edge": Edge::user_agent("u1", "a1") }));
    assert_eq!(status, 409);
    assert_eq!(body["error"], "duplicate_edge");
    assert!(body["message"].as_str().unwrap().contains("already granted"));
    assert_eq!(body["tick"], 1);

    let (status, body) = admin(&live, "/permissions/revoke", json!({ "edge": Edge::user_agent("u2", "a1") }));
    assert_eq!((status, body["error"].as_str()), (409, Some("edge_not_present")));
}

#[test]
fn identity_is_required_and_admin_endpoints_are_admin_only() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    let body = json!({ "edge": Edge::user_agent("u1", "a1") });
    let r = live.client.post("/permissions/grant", "user:u1", &body).unwrap();
    assert_eq!((r.status, r.body["error"].as_str()), (403, Some("forbidden")));
    let r = live.client.post("/permissions/grant", "user:nobody", &body).unwrap();
    assert_eq!(r.status, 401);
    let r = live.client.post("/permissions/grant", "root", &body).unwrap();
    assert_eq!(r.status, 401);
    assert_eq!(live.client.get("/audit", "user:u1").unwrap().status, 403);

    grant(&live, Edge::user_agent("u1", "a1"));
    let read = json!({ "user": "u1", "agent": "a1", "query": "oak" });
    assert_eq!(live.client.post("/memory/read", "user:u2", &read).unwrap().status, 403);
    assert_eq!(live.client.post("/memory/read", "user:u1", &read).unwrap().status, 200);
    assert_eq!(live.client.post("/memory/read", "agent:a1", &read).unwrap().status, 200);
}

#[test]
fn malformed_bodies_and_client_timestamps_are_rejected() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    grant(&live, Edge::user_agent("u1", "a1"));
    let (status, body) = admin(&live, "/permissions/grant", json!({ "edge": { "user": "u1" } }));
    assert_eq!((status, body["error"].as_str()), (400, Some("validation")));
    let backdated = json!({ "trace": {
        "user": "u1", "agent": "a1", "timestamp": 0, "subquery": "q", "response": "r"
    }});
    let (status, body) = admin(&live, "/memory/write", backdated);
    assert_eq!((status, body["error"].as_str()), (400, Some("validation")));
    let (status, _) = admin(&live, "/permissions/grant", json!({ "edge": Edge::user_agent("u1", "ghost") }));
    assert_eq!(status, 400);
}

#[test]
fn revoked_pair_reads_are_forbidden_and_logged_as_denied() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    grant(&live, Edge::agent_resource("a1", "r1"));
    grant(&live, Edge::user_agent("u1", "a1"));
    grant(&live, Edge::user_agent("u2", "a1"));
    let write = json!({ "trace": {
        "user": "u1", "agent": "a1", "subquery": "oak density",
        "response": "0.75 g/cm3 per u1's lookup", "resources": ["r1"]
    }});
    let (status, body) = admin(&live, "/memory/write", write);
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["fragments"].as_array().unwrap().len(), 2);

    let read = json!({ "user": "u2", "agent": "a1", "query": "oak density" });
    let r = live.client.post("/memory/read", "user:u2", &read).unwrap();
    assert_eq!(r.status, 200);
    let fragments = r.body["fragments"].as_array().unwrap();
    assert_eq!(fragments.len(), 1, "only the shared fragment crosses users");
    assert!(!fragments[0]["value"].as_str().unwrap().contains("u1"), "creator is redacted");

    assert_eq!(admin(&live, "/permissions/revoke", json!({ "edge": Edge::user_agent("u2", "a1") })).0, 200);
    let r = live.client.post("/memory/read", "user:u2", &read).unwrap();
    assert_eq!((r.status, r.body["error"].as_str()), (403, Some("agent_not_permitted")));
    assert!(r.body["tick"].as_u64().is_some());

    let log = AuditLog::from_jsonl(&live.client.audit_jsonl("admin", 0).unwrap()).unwrap();
    let reads: Vec<_> = log.records().iter().filter(|r| r.action == AuditAction::FragmentRead).collect();
    assert_eq!(reads.len(), 2);
    assert_eq!(reads[0].detail_str("decision"), None);
    assert_eq!(reads[1].detail_str("decision"), Some("denied"));
    let tail = live.client.audit_jsonl("admin", reads[1].seq).unwrap();
    assert_eq!(tail.lines().count(), 1);
}

#[test]
fn undeclared_resources_are_refused_on_write() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    grant(&live, Edge::user_agent("u1", "a2"));
    let write = json!({ "trace": {
        "user": "u1", "agent": "a2", "subquery": "q", "response": "r", "resources": ["r1"]
    }});
    let (status, body) = admin(&live, "/memory/write", write);
    assert_eq!((status, body["error"].as_str()), (403, Some("resource_not_permitted")));
}

#[test]
fn snapshots_answer_for_past_ticks() {
    let live = start(AppState::new(&small_config(), None, ServiceOptions::default()).unwrap());
    grant(&live, Edge::user_agent("u1", "a1"));
    grant(&live, Edge::user_agent("u1", "a2"));
    admin(&live, "/permissions/revoke", json!({ "edge": Edge::user_agent("u1", "a1") }));
    let at = |t: u64| live.client.get(&format!("/permissions/snapshot?user=u1&t={t}"), "user:u1").unwrap();
    assert_eq!(at(0).body["agents"], json!([]));
    assert_eq!(at(2).body["agents"], json!(["a1", "a2"]));
    assert_eq!(at(3).body["agents"], json!(["a2"]));
    assert_eq!(at(3).body["tick"], 3);
    assert_eq!(at(9).status, 400);
    assert_eq!(live.client.get("/permissions/snapshot?user=u1", "user:u2").unwrap().status, 403);
    let r = live.client.get("/permissions/snapshot?agent=a1", "admin").unwrap();
    assert_eq!(r.body["resources"], json!([]));
    assert_eq!(live.client.get("/permissions/snapshot", "admin").unwrap().status, 400);
}

#[test]
fn episodes_return_answers_and_sequential_ids() {
    let live = start(
        AppState::new(&small_config(), None, ServiceOptions { bootstrap: true, ..Default::default() }).unwrap(),
    );
    grant(&live, Edge::user_agent("u1", "a1"));
    let ask = json!({ "user": "u1", "query": "What is the oak density?", "category": "botany" });
    let r = live.client.post("/episodes", "user:u1", &ask).unwrap();
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.body["episode_id"], 0);
    assert!(r.body["answer"].as_str().unwrap().contains("0.75"));
    assert_eq!(r.body["resource_calls"], 1);
    let again = live.client.post("/episodes", "user:u1", &ask).unwrap();
    assert_eq!(again.body["episode_id"], 1);
    assert_eq!(again.body["resource_calls"], 0, "answered from memory");
    assert_eq!(live.client.post("/episodes", "user:u2", &ask).unwrap().status, 403);
    let lonely = live.client.post("/episodes", "user:u2", &json!({ "user": "u2", "query": "oak?" })).unwrap();
    assert_eq!(lonely.body["outcome"], "no_accessible_agents");
}

fn reload(dir: &Path) -> (AuditLog, collabmem::AccessTimeline, MemoryStore) {
    let principals: Principals =
        serde_json::from_str(&std::fs::read_to_string(dir.join("principals.json")).unwrap()).unwrap();
    let timeline =
        collabmem::AccessTimeline::from_jsonl(&std::fs::read_to_string(dir.join("timeline.jsonl")).unwrap(), principals)
            .unwrap();
    let store = MemoryStore::from_jsonl_infer(&std::fs::read_to_string(dir.join("store.jsonl")).unwrap()).unwrap();
    let audit = AuditLog::from_jsonl(&std::fs::read_to_string(dir.join("audit.jsonl")).unwrap()).unwrap();
    (audit, timeline, store)
}

#[test]
fn restart_on_the_same_files_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let write = json!({ "trace": {
        "user": "u1", "agent": "a1", "subquery": "oak density", "response": "0.75", "resources": ["r1"]
    }});
    let tick_before = {
        let live = start(AppState::new(&cfg, Some(dir.path()), ServiceOptions { bootstrap: true, ..Default::default() }).unwrap());
        grant(&live, Edge::user_agent("u1", "a1"));
        let (status, body) = admin(&live, "/memory/write", write.clone());
        assert_eq!(status, 200);
        body["tick"].as_u64().unwrap()
    };
    let live = start(AppState::new(&cfg, Some(dir.path()), ServiceOptions { bootstrap: true, ..Default::default() }).unwrap());
    assert_eq!(grant(&live, Edge::user_agent("u1", "a1")), 409, "grant survived the restart");
    let r = live.client.post("/memory/read", "user:u1", &json!({ "user": "u1", "agent": "a1", "query": "oak density" })).unwrap();
    assert_eq!(r.status, 200);
    assert_eq!(r.body["tick"].as_u64().unwrap(), tick_before);
    assert_eq!(r.body["fragments"].as_array().unwrap().len(), 2, "private and shared fragment written before the restart");
    let (status, body) = admin(&live, "/memory/write", write);
    assert_eq!(status, 200);
    assert!(body["tick"].as_u64().unwrap() > tick_before);

    let (audit, timeline, store) = reload(dir.path());
    assert!(verify(audit.records(), &timeline, &store).is_empty());
    assert_eq!(store.len(), 4);
}

#[test]
fn http_replay_matches_the_library_run() {
    let cfg = presets::evolving_schedule(11, 12);
    let library = run_scenario(&cfg, None).unwrap();
    let live = start(AppState::new(&cfg, None, ServiceOptions::default()).unwrap());
    let replies = replay_plan(&live.client, "admin", &plan(&cfg).unwrap()).unwrap();
    assert_eq!(replies.len(), library.episodes.len());
    assert_eq!(live.client.audit_jsonl("admin", 0).unwrap(), library.substrate.audit().to_jsonl());
}
