//! Browser demo: three interactive views over the substrate, exported
//! through wasm-bindgen. Each export returns a JSON string; the plain Rust
//! functions behind them are what the native tests exercise.

use std::collections::BTreeSet;
use std::sync::Arc;

use collabmem::memory::Clause;
use collabmem::retrieval::RetrievalConfig;
use collabmem::scenario::compare_modes;
use collabmem::schedule::{generate_schedule, GraphSchedule};
use collabmem::{
    presets, DeterministicEmbedder, Edge, InteractionTrace, MemoryMode, PolicySet, PrincipalId, Substrate,
    SubstrateError,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Parses `"5,10,15"` into edge-count targets.
pub fn parse_targets(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("not an edge count: {s:?}")))
        .collect()
}

/// Grant/revoke schedule over a `users × agents` graph: one adjacency
/// matrix per phase, plus the edges each phase added and removed.
pub fn schedule_view(users: usize, agents: usize, p: f64, seed: u64, targets: &str) -> Result<Value, String> {
    if users == 0 || agents == 0 || users * agents > 400 {
        return Err("users × agents must be between 1 and 400".into());
    }
    let targets = parse_targets(targets)?;
    let users: Vec<String> = (1..=users).map(|i| format!("u{i}")).collect();
    let agents: Vec<String> = (1..=agents).map(|i| format!("a{i}")).collect();
    let schedule = GraphSchedule::from_targets(&targets, seed, p);
    let g = generate_schedule(&schedule, &users, &agents).map_err(|e| e.to_string())?;
    let phases: Vec<Value> = g
        .boundaries
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let matrix: Vec<Vec<bool>> = users
                .iter()
                .map(|u| agents.iter().map(|a| g.timeline.is_present(&Edge::user_agent(u, a), b.tick)).collect())
                .collect();
            let changes: Vec<Value> = g
                .phase_events(i)
                .iter()
                .map(|e| json!({ "tick": e.tick, "action": e.action, "edge": e.edge }))
                .collect();
            json!({ "label": b.label, "target": targets[i], "edges": b.edges, "tick": b.tick, "matrix": matrix, "changes": changes })
        })
        .collect();
    Ok(json!({ "users": users, "agents": agents, "phases": phases }))
}

/// Shared-vs-isolated resource calls for five users at the given overlap.
pub fn overlap_view(overlap: f64, queries: usize, seed: u64) -> Result<Value, String> {
    if !(1..=120).contains(&queries) {
        return Err("queries must be between 1 and 120".into());
    }
    let cfg = presets::fully_collaborative(overlap, queries, seed);
    let (report, shared, isolated) = compare_modes(&cfg, None).map_err(|e| e.to_string())?;
    Ok(json!({
        "total": report.total,
        "global": report.global,
        "global_queries": shared.plan.global_queries.len(),
        "episodes": shared.episodes.len(),
        "accuracy": {
            "shared": shared.metrics.bins.first().map(|b| b.accuracy),
            "isolated": isolated.metrics.bins.first().map(|b| b.accuracy),
        },
    }))
}

const USERS: [&str; 3] = ["alice", "bob", "carol"];
const AGENTS: [&str; 3] = ["research", "finance", "legal"];
const GRANTS: [(&str, &str); 5] =
    [("alice", "research"), ("alice", "finance"), ("bob", "research"), ("bob", "legal"), ("carol", "finance")];
const TOOLS: [(&str, &str); 2] = [("research", "papers"), ("finance", "ledger")];
/// (user, agent, resource, subquery, response)
const EXCHANGES: [(&str, &str, Option<&str>, &str, &str); 5] = [
    ("alice", "research", Some("papers"), "graphene conductivity", "graphene sheet conductivity is about 1e8 S/m"),
    ("bob", "research", Some("papers"), "perovskite solar efficiency", "record perovskite cell efficiency is near 26%"),
    ("alice", "finance", Some("ledger"), "q3 revenue forecast", "q3 revenue is forecast at 4.2M"),
    ("carol", "finance", Some("ledger"), "supplier payment terms", "suppliers are paid net 45"),
    ("bob", "legal", None, "patent filing deadline", "the provisional patent must be filed by March"),
];

/// A small fixed world: five exchanges written through the default
/// policies, then the listed `user-agent` grants revoked.
fn demo_world(revoked: &[(String, String)]) -> Result<Substrate, String> {
    let e = |e: SubstrateError| e.to_string();
    let mut s = Substrate::new(
        Arc::new(DeterministicEmbedder::new(64)),
        PolicySet::default_instantiation(),
        RetrievalConfig::default(),
    );
    let ids = USERS
        .iter()
        .map(|u| PrincipalId::user(*u))
        .chain(AGENTS.iter().map(|a| PrincipalId::agent(*a)))
        .chain(TOOLS.iter().map(|(_, r)| PrincipalId::resource(*r)));
    for id in ids {
        s.register(&id).map_err(e)?;
    }
    for (a, r) in TOOLS {
        s.grant(Edge::agent_resource(a, r)).map_err(e)?;
    }
    for (u, a) in GRANTS {
        s.grant(Edge::user_agent(u, a)).map_err(e)?;
    }
    for (user, agent, resource, subquery, response) in EXCHANGES {
        let trace = InteractionTrace {
            user: user.into(),
            agent: agent.into(),
            timestamp: s.now(),
            subquery: subquery.into(),
            response: response.into(),
            resources: resource.map(String::from).into_iter().collect(),
        };
        s.encode_and_write(&trace, MemoryMode::Shared, None).map_err(e)?;
    }
    for (u, a) in revoked {
        s.revoke(Edge::user_agent(u, a)).map_err(e)?;
    }
    Ok(s)
}

/// `"bob-research, carol-finance"` → pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.split_once('-')
                .map(|(u, a)| (u.trim().to_string(), a.trim().to_string()))
                .ok_or_else(|| format!("expected user-agent, got {s:?}"))
        })
        .collect()
}

/// Every fragment of the demo world scored against `query` for `user`
/// served by `agent`: similarity, the first failing admissibility clause,
/// and whether it made the tiered top-k.
pub fn retrieval_view(
    user: &str,
    agent: &str,
    query: &str,
    revoked: &str,
    k_user: usize,
    k_cross: usize,
    threshold: f64,
) -> Result<Value, String> {
    let s = demo_world(&parse_pairs(revoked)?)?;
    let cfg = RetrievalConfig { k_user, k_cross, threshold };
    cfg.validate().map_err(|e| e.to_string())?;
    let now = s.now();
    let embedding = s.embedder().embed(query).map_err(|e| e.to_string())?;
    let selected: BTreeSet<String> =
        match collabmem::retrieve(s.store(), s.timeline(), user, agent, now, &embedding, &cfg) {
            Ok(view) if s.timeline().is_present(&Edge::user_agent(user, agent), now) => {
                view.iter().map(|r| r.id.as_str().to_string()).collect()
            }
            Ok(_) => BTreeSet::new(),
            Err(e) => return Err(e.to_string()),
        };
    let mut rows: Vec<Value> = Vec::new();
    for m in s.store().iter() {
        let decision = s.store().explain(s.timeline(), user, agent, now, m.id()).map_err(|e| e.to_string())?;
        let similarity: f64 = m.embedding().iter().zip(&embedding).map(|(a, b)| a * b).sum();
        rows.push(json!({
            "id": m.id(),
            "tier": m.tier(),
            "creator": m.provenance().creator(),
            "agents": m.provenance().agents(),
            "resources": m.provenance().resources(),
            "key": m.key(),
            "value": m.value(),
            "similarity": similarity,
            "failed_clause": decision.failed_clause.map(clause_name),
            "selected": selected.contains(m.id().as_str()),
        }));
    }
    rows.sort_by(|a, b| b["similarity"].as_f64().unwrap_or(0.0).total_cmp(&a["similarity"].as_f64().unwrap_or(0.0)));
    let granted: Vec<Edge> = s.timeline().edges_at(now).into_iter().collect();
    let denied = !s.timeline().is_present(&Edge::user_agent(user, agent), now);
    Ok(json!({ "tick": now, "granted": granted, "denied": denied, "fragments": rows }))
}

fn clause_name(c: Clause) -> &'static str {
    match c {
        Clause::NotYetCreated => "not yet created",
        Clause::TierOwnership => "private to another user",
        Clause::AgentSubset => "contributing agent not available to this user",
        Clause::ResourceSubset => "resource not available to this agent",
    }
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule_explorer(users: usize, agents: usize, p: f64, seed: u64, targets: &str) -> Result<String, JsError> {
    to_js(schedule_view(users, agents, p, seed, targets))
}

#[wasm_bindgen]
pub fn overlap_comparison(overlap: f64, queries: usize, seed: u64) -> Result<String, JsError> {
    to_js(overlap_view(overlap, queries, seed))
}

#[wasm_bindgen]
pub fn retrieval_explorer(
    user: &str,
    agent: &str,
    query: &str,
    revoked: &str,
    k_user: usize,
    k_cross: usize,
    threshold: f64,
) -> Result<String, JsError> {
    to_js(retrieval_view(user, agent, query, revoked, k_user, k_cross, threshold))
}
