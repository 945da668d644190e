//! Desk-scale configurations of the three collaboration regimes: fully
//! collaborative, asymmetric roles, and a dynamically evolving access graph.

use std::collections::BTreeMap;

use serde_json::json;

use crate::orchestration::{AgentBackend, AgentSpec, Document, ResourceBackend, ResourceSpec};
use crate::retrieval::RetrievalConfig;
use crate::scenario::{AccessSource, CorpusSource, PhaseAccess, QueryItem, ScenarioConfig, WorkloadSpec};
use crate::schedule::GraphSchedule;

pub const DOMAINS: [&str; 6] = ["entertainment", "business", "sports", "technology", "health", "science"];

pub const SCIENCE_DOMAINS: [&str; 5] = [
    "materials_paper_wood",
    "materials_ceramics",
    "energy_fuels",
    "chemistry_analytical",
    "physics_mathematical",
];

/// Edge counts at the nine phase boundaries of the evolving scenario.
pub const EVOLVING_TARGETS: [usize; 9] = [5, 10, 15, 20, 25, 20, 15, 10, 5];

pub fn user_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("user_{i}")).collect()
}

fn domain_agent(domain: &str) -> AgentSpec {
    AgentSpec {
        id: format!("{domain}_agent"),
        specialization: format!("Specialist in {}.", domain.replace('_', " ")),
        topics: vec![domain.to_string()],
        backend: AgentBackend::Scripted { resource: Some(format!("{domain}_kb")) },
    }
}

fn resource(id: &str, kind: &str, category: &str) -> ResourceSpec {
    ResourceSpec {
        id: id.to_string(),
        kind: kind.to_string(),
        schema: json!({"type": "object", "properties": {"query": {"type": "string"}}, "required": ["query"]}),
        backend: ResourceBackend::Corpus { category: category.to_string() },
    }
}

fn one_to_one(domains: &[&str]) -> BTreeMap<String, Vec<String>> {
    domains.iter().map(|d| (format!("{d}_agent"), vec![format!("{d}_kb")])).collect()
}

#[allow(clippy::too_many_arguments)]
fn config(
    name: String,
    seed: u64,
    users: Vec<String>,
    agents: Vec<AgentSpec>,
    resources: Vec<ResourceSpec>,
    agent_resources: BTreeMap<String, Vec<String>>,
    access: AccessSource,
    corpus: CorpusSource,
    workload: WorkloadSpec,
    retrieval: RetrievalConfig,
) -> ScenarioConfig {
    ScenarioConfig {
        name,
        seed,
        mode: Default::default(),
        users,
        agents,
        resources,
        agent_resources,
        access,
        corpus,
        workload,
        policies: None,
        retrieval,
        embedder: Default::default(),
        coordinator: Default::default(),
        aggregator: Default::default(),
        judge: crate::scenario::JudgeSpec::Contains,
        limits: Default::default(),
    }
}

/// Five users with access to all six domain agents, each owning one
/// knowledge base; an `overlap` fraction of the queries is asked by every
/// user.
pub fn fully_collaborative(overlap: f64, queries: usize, seed: u64) -> ScenarioConfig {
    let users = user_names(5);
    let all: Vec<String> = DOMAINS.iter().map(|d| format!("{d}_agent")).collect();
    config(
        format!("fully-collaborative-{overlap}"),
        seed,
        users.clone(),
        DOMAINS.iter().map(|d| domain_agent(d)).collect(),
        DOMAINS.iter().map(|d| resource(&format!("{d}_kb"), "knowledge_base", d)).collect(),
        one_to_one(&DOMAINS),
        AccessSource::Static { user_agents: users.iter().map(|u| (u.clone(), all.clone())).collect() },
        CorpusSource::Synthetic { per_category: queries.div_ceil(DOMAINS.len()) },
        WorkloadSpec { overlap, limit: Some(queries), roles: None },
        RetrievalConfig::default(),
    )
}

const PRODUCTS: [&str; 6] = [
    "smart home hub",
    "electric cargo bike",
    "plant based snack bar",
    "portable solar charger",
    "fitness tracker",
    "cold brew coffee",
];

/// Documents for the four business functions, one per product.
fn business_corpus() -> (Vec<Document>, Vec<QueryItem>) {
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    for (i, p) in PRODUCTS.iter().enumerate() {
        let growth = 4 + 3 * i;
        let margin = 18 + 2 * i;
        let lead = 3 + i;
        let facts = [
            ("market", format!("Market report: demand for the {p} grows {growth}% per year, led by urban buyers.")),
            ("finance", format!("Finance forecast: the {p} reaches a {margin}% gross margin by year two.")),
            ("logistics", format!("Logistics comparison: regional vendors ship the {p} in {lead} weeks.")),
            ("strategy", format!("Strategy computation: the {p} breaks even after {} quarters.", 5 + i)),
        ];
        for (cat, text) in facts {
            docs.push(Document { id: format!("{cat}-{i}"), category: cat.to_string(), text });
        }
        queries.push(QueryItem {
            id: format!("task-{i}"),
            category: "strategy".into(),
            text: format!(
                "Assess market demand for the {p}. Project the finance margin of the {p}. \
                 Compare logistics vendors for the {p}. Recommend a strategy for the {p}."
            ),
            answer: None,
        });
    }
    (docs, queries)
}

/// Four roles with asymmetric agent access; each composite task is split
/// into per-role subtasks by keyword.
pub fn asymmetric_roles(seed: u64) -> ScenarioConfig {
    let users: Vec<String> =
        ["market_researcher", "financial_analyst", "logistics_lead", "strategy_director"].map(String::from).to_vec();
    let agent = |id: &str, topic: &str, spec: &str, res: &str| AgentSpec {
        id: id.to_string(),
        specialization: spec.to_string(),
        topics: vec![topic.to_string()],
        backend: AgentBackend::Scripted { resource: Some(res.to_string()) },
    };
    let agents = vec![
        agent("market_agent", "market", "Analyzes market competition and consumer data.", "market_kb"),
        agent("finance_agent", "finance", "Performs financial modeling and cost projections.", "finance_forecaster"),
        agent("logistics_agent", "logistics", "Evaluates supply chain feasibility and vendor performance.", "logistics_comparator"),
        agent("decision_agent", "strategy", "Synthesizes recommendations from other domains.", "strategic_computation"),
    ];
    let resources = vec![
        resource("market_kb", "knowledge_base", "market"),
        resource("finance_forecaster", "forecast_model", "finance"),
        resource("logistics_comparator", "comparator", "logistics"),
        resource("strategic_computation", "computation", "strategy"),
    ];
    let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let agent_resources = BTreeMap::from([
        ("market_agent".to_string(), list(&["market_kb", "strategic_computation"])),
        ("finance_agent".to_string(), list(&["finance_forecaster", "strategic_computation"])),
        ("logistics_agent".to_string(), list(&["logistics_comparator", "strategic_computation"])),
        (
            "decision_agent".to_string(),
            list(&["market_kb", "finance_forecaster", "logistics_comparator", "strategic_computation"]),
        ),
    ]);
    let user_agents = BTreeMap::from([
        ("market_researcher".to_string(), list(&["market_agent"])),
        ("financial_analyst".to_string(), list(&["finance_agent", "decision_agent"])),
        ("logistics_lead".to_string(), list(&["logistics_agent", "finance_agent"])),
        (
            "strategy_director".to_string(),
            list(&["market_agent", "finance_agent", "logistics_agent", "decision_agent"]),
        ),
    ]);
    let roles = BTreeMap::from([
        ("market_researcher".to_string(), list(&["market"])),
        ("financial_analyst".to_string(), list(&["finance", "strategy"])),
        ("logistics_lead".to_string(), list(&["logistics", "finance"])),
        ("strategy_director".to_string(), list(&["market", "finance", "logistics", "strategy"])),
    ]);
    let (documents, queries) = business_corpus();
    let mut cfg = config(
        "asymmetric-roles".into(),
        seed,
        users,
        agents,
        resources,
        agent_resources,
        AccessSource::Static { user_agents },
        CorpusSource::Inline { documents, queries },
        WorkloadSpec { overlap: 0.0, limit: None, roles: Some(roles) },
        RetrievalConfig { k_user: 20, k_cross: 20, threshold: 0.1 },
    );
    cfg.judge = crate::scenario::JudgeSpec::None;
    cfg
}

fn evolving_base(name: String, seed: u64, access: AccessSource, queries: usize) -> ScenarioConfig {
    config(
        name,
        seed,
        user_names(5),
        SCIENCE_DOMAINS.iter().map(|d| domain_agent(d)).collect(),
        SCIENCE_DOMAINS.iter().map(|d| resource(&format!("{d}_kb"), "knowledge_base", d)).collect(),
        one_to_one(&SCIENCE_DOMAINS),
        access,
        CorpusSource::Synthetic { per_category: queries.div_ceil(SCIENCE_DOMAINS.len()) },
        WorkloadSpec { overlap: 0.0, limit: Some(queries), roles: None },
        RetrievalConfig::default(),
    )
}

/// Five users, five agents with one knowledge base each, and a seeded
/// Bernoulli schedule growing the user→agent graph 5→25 edges and back to
/// 5. The same queries are replayed in every phase.
pub fn evolving_schedule(seed: u64, queries: usize) -> ScenarioConfig {
    let schedule = GraphSchedule::from_targets(&EVOLVING_TARGETS, seed, crate::schedule::DEFAULT_ACCEPT_PROBABILITY);
    evolving_base(format!("evolving-schedule-{seed}"), seed, AccessSource::Schedule { schedule }, queries)
}

/// The published per-phase user→agent tables of the evolving scenario.
pub fn published_evolving_phases() -> Vec<PhaseAccess> {
    const W: &str = "materials_paper_wood_agent";
    const C: &str = "materials_ceramics_agent";
    const E: &str = "energy_fuels_agent";
    const H: &str = "chemistry_analytical_agent";
    const P: &str = "physics_mathematical_agent";
    let tables: [[&[&str]; 5]; 9] = [
        [&[W, C], &[P], &[], &[W], &[H]],
        [&[W, C, E], &[P, E], &[E, H], &[W, E], &[H]],
        [&[W, C, E], &[P, E, H], &[E, H, C], &[W, E, P], &[H, C, E]],
        [&[W, C, E, H], &[P, E, H, C], &[E, H, C, P], &[W, E, P, C], &[H, C, E, P]],
        [&[W, C, E, H, P], &[P, E, H, C, W], &[E, H, C, P, W], &[W, E, P, C, H], &[H, C, E, P, W]],
        [&[H, E, P], &[H, E, W, C], &[H, E, W, C, P], &[H, E, C, P], &[E, W, C, P]],
        [&[E], &[H, E, C], &[H, W, C, P], &[H, E, C, P], &[E, W, P]],
        [&[], &[H, E, C], &[W, C], &[C, P], &[E, W, P]],
        [&[], &[H], &[C], &[C], &[E, P]],
    ];
    tables
        .iter()
        .enumerate()
        .map(|(i, row)| PhaseAccess {
            label: format!("t{i}"),
            user_agents: user_names(5)
                .into_iter()
                .zip(row.iter())
                .map(|(u, agents)| (u, agents.iter().map(|a| a.to_string()).collect()))
                .collect(),
        })
        .collect()
}

/// The evolving scenario over the published phase tables.
pub fn evolving_published(seed: u64, queries: usize) -> ScenarioConfig {
    evolving_base(
        "evolving-published".into(),
        seed,
        AccessSource::Phases { phases: published_evolving_phases() },
        queries,
    )
}

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 4] = ["fully-collaborative", "asymmetric-roles", "evolving-schedule", "evolving-published"];

pub fn by_name(name: &str, seed: u64) -> Option<ScenarioConfig> {
    Some(match name {
        "fully-collaborative" => fully_collaborative(0.5, 100, seed),
        "asymmetric-roles" => asymmetric_roles(seed),
        "evolving-schedule" => evolving_schedule(seed, 100),
        "evolving-published" => evolving_published(seed, 100),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in NAMES {
            by_name(name, 1).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn published_tables_have_the_scheduled_edge_counts() {
        let counts: Vec<usize> = published_evolving_phases()
            .iter()
            .map(|p| p.user_agents.values().map(Vec::len).sum())
            .collect();
        assert_eq!(counts, EVOLVING_TARGETS);
    }

    #[test]
    fn yaml_round_trip() {
        for name in NAMES {
            let cfg = by_name(name, 4).unwrap();
            let back = ScenarioConfig::from_str_at(&cfg.to_yaml(), None).unwrap();
            assert_eq!(back, cfg);
        }
    }
}
