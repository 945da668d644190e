//! Config-driven scenario runs with scripted backends: workload generation,
//! phase-by-phase replay over an evolving access graph, artifacts, and the
//! shared-versus-isolated comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::access::{Action, Edge};
use crate::audit::{AuditAction, AuditRecord};
use crate::embed::EmbedderSpec;
use crate::ids::{PrincipalId, Tick};
use crate::metrics::{access_matrix, compute_metrics, resource_calls_by_query, AccessMatrix, Binning, MetricsError, MetricsReport, Window};
use crate::orchestration::{
    run_episode, AgentBackend, AgentSpec, Aggregator, ConcatAggregator, ContainsJudge, Coordinator, Document,
    EpisodeRequest, Judge, Limits, OrchestrationError, QueryEpisode, RemoteAggregator, RemoteCoordinator,
    RemoteJudge, ResourceSpec, Runtime, ScriptedCoordinator, TopicRouter,
};
use crate::policy::{MemoryMode, PolicySet};
use crate::remote::ChatClient;
use crate::retrieval::RetrievalConfig;
use crate::schedule::{generate_schedule, GraphSchedule, ScheduleError};
use crate::substrate::{Substrate, SubstrateError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("overlap fraction {0} outside [0, 1]")]
    InvalidOverlap(f64),
    #[error("workload needs at least one user")]
    NoUsers,
    #[error("requested {requested} queries but only {available} are available")]
    InsufficientQueries { requested: usize, available: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: String,
    pub category: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAccess {
    pub label: String,
    /// user → agents granted during this phase
    pub user_agents: BTreeMap<String, Vec<String>>,
}

/// Where the user→agent graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccessSource {
    /// One fixed graph for the whole run.
    Static { user_agents: BTreeMap<String, Vec<String>> },
    /// Explicit per-phase graphs; the workload is replayed once per phase.
    Phases { phases: Vec<PhaseAccess> },
    /// Bernoulli grant/revoke schedule; the workload is replayed once per phase.
    Schedule { schedule: GraphSchedule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Line-delimited JSON files; relative paths resolve against the config file.
    Files { documents: PathBuf, queries: PathBuf },
    Inline { documents: Vec<Document>, queries: Vec<QueryItem> },
    /// `per_category` fact documents and matching questions for every agent topic.
    Synthetic { per_category: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Fraction of queries asked by every user.
    #[serde(default)]
    pub overlap: f64,
    /// Use only the first `limit` queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Role keywords per user. When set, each query is split into
    /// sentences and every user receives the sentences mentioning one of
    /// their keywords, instead of the overlap assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinatorSpec {
    #[default]
    TopicRouter,
    Scripted { script: Vec<String> },
    Remote { endpoint: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorSpec {
    #[default]
    Concat,
    Remote { endpoint: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeSpec {
    #[default]
    None,
    /// Scores 1 when the query's expected answer appears in the final answer.
    Contains,
    Remote {
        endpoint: String,
        #[serde(default)]
        prompt: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: MemoryMode,
    pub users: Vec<String>,
    pub agents: Vec<AgentSpec>,
    pub resources: Vec<ResourceSpec>,
    /// agent → resources; fixed for the run.
    pub agent_resources: BTreeMap<String, Vec<String>>,
    pub access: AccessSource,
    pub corpus: CorpusSource,
    pub workload: WorkloadSpec,
    /// Defaults to identity reads and creator-redacting shared writes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<PolicySet>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub coordinator: CoordinatorSpec,
    #[serde(default)]
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub judge: JudgeSpec,
    #[serde(default)]
    pub limits: Limits,
}

impl ScenarioConfig {
    /// Parses YAML or JSON and resolves relative corpus paths against `base`.
    pub fn from_str_at(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut cfg: ScenarioConfig =
            serde_yaml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        if let (CorpusSource::Files { documents, queries }, Some(base)) = (&mut cfg.corpus, base) {
            for p in [documents, queries] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_str_at(&text, path.parent())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Overrides the run seed, including the schedule's.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let AccessSource::Schedule { schedule } = &mut self.access {
            schedule.seed = seed;
        }
        self
    }

    pub fn with_mode(mut self, mode: MemoryMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        let users: BTreeSet<&str> = self.users.iter().map(String::as_str).collect();
        if users.len() != self.users.len() {
            return bad("duplicate user".into());
        }
        let agents: BTreeSet<&str> = self.agents.iter().map(|a| a.id.as_str()).collect();
        if agents.len() != self.agents.len() {
            return bad("duplicate agent".into());
        }
        let resources: BTreeSet<&str> = self.resources.iter().map(|r| r.id.as_str()).collect();
        if resources.len() != self.resources.len() {
            return bad("duplicate resource".into());
        }
        for id in users.iter().chain(&agents).chain(&resources) {
            if id.is_empty() || id.contains(':') {
                return bad(format!("invalid principal name {id:?}"));
            }
        }
        for (a, rs) in &self.agent_resources {
            if !agents.contains(a.as_str()) {
                return bad(format!("agent_resources names unknown agent {a}"));
            }
            if let Some(r) = rs.iter().find(|r| !resources.contains(r.as_str())) {
                return bad(format!("agent_resources names unknown resource {r}"));
            }
        }
        for a in &self.agents {
            if let AgentBackend::Scripted { resource: Some(r) } = &a.backend {
                if !resources.contains(r.as_str()) {
                    return bad(format!("agent {} scripted against unknown resource {r}", a.id));
                }
            }
        }
        let check_graph = |g: &BTreeMap<String, Vec<String>>| -> Result<(), ScenarioError> {
            for (u, list) in g {
                if !users.contains(u.as_str()) {
                    return Err(ScenarioError::Config(format!("access names unknown user {u}")));
                }
                if let Some(a) = list.iter().find(|a| !agents.contains(a.as_str())) {
                    return Err(ScenarioError::Config(format!("access names unknown agent {a}")));
                }
            }
            Ok(())
        };
        match &self.access {
            AccessSource::Static { user_agents } => check_graph(user_agents)?,
            AccessSource::Phases { phases } => {
                if phases.is_empty() {
                    return bad("no phases".into());
                }
                for p in phases {
                    check_graph(&p.user_agents)?;
                }
            }
            AccessSource::Schedule { schedule } => {
                if schedule.phases.is_empty() {
                    return bad("no schedule phases".into());
                }
            }
        }
        if !(0.0..=1.0).contains(&self.workload.overlap) {
            return Err(ScenarioError::InvalidOverlap(self.workload.overlap));
        }
        if let Some(roles) = &self.workload.roles {
            check_graph(&roles.keys().map(|u| (u.clone(), Vec::new())).collect())?;
        }
        if self.limits.max_rounds == 0 {
            return bad("limits.max_rounds must be at least 1".into());
        }
        self.retrieval.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
        Ok(())
    }

    fn topics(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.agents.iter().flat_map(|a| &a.topics).collect();
        set.into_iter().cloned().collect()
    }

    pub fn load_corpus(&self) -> Result<(Vec<Document>, Vec<QueryItem>), ScenarioError> {
        match &self.corpus {
            CorpusSource::Files { documents, queries } => {
                Ok((read_jsonl(documents)?, read_jsonl(queries)?))
            }
            CorpusSource::Inline { documents, queries } => Ok((documents.clone(), queries.clone())),
            CorpusSource::Synthetic { per_category } => Ok(synthetic_corpus(&self.topics(), *per_category)),
        }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ScenarioError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ScenarioError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

const VALUE_WORDS: &[&str] = &[
    "amber", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "jasper",
    "krypton", "lumen", "meridian", "nebula", "onyx", "prism", "quartz", "riviera", "sierra", "tundra",
    "umbra", "vertex", "willow", "xenon", "yarrow", "zephyr",
];

/// Fact documents `"<topic> record i: the reference value of <topic> record
/// i is <word>."` and the matching questions, with `<word>` as the expected
/// answer.
pub fn synthetic_corpus(topics: &[String], per_category: usize) -> (Vec<Document>, Vec<QueryItem>) {
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    // Questions interleave categories so a prefix covers every topic.
    for i in 0..per_category {
        for (c, topic) in topics.iter().enumerate() {
            let name = topic.replace('_', " ");
            let word = VALUE_WORDS[(i * 7 + c * 3) % VALUE_WORDS.len()];
            docs.push(Document {
                id: format!("{topic}-{i}"),
                category: topic.clone(),
                text: format!("{name} record {i}: the reference value of {name} record {i} is {word}."),
            });
            queries.push(QueryItem {
                id: format!("q-{topic}-{i}"),
                category: topic.clone(),
                text: format!("What is the reference value of {name} record {i}?"),
                answer: Some(word.to_string()),
            });
        }
    }
    (docs, queries)
}

/// Per-user query assignment plus a global interleaving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    /// Indices (into the query list) asked by every user.
    pub global: BTreeSet<usize>,
    /// Episode order: (user, query index).
    pub order: Vec<(String, usize)>,
}

impl Workload {
    /// Each user's queries in the order they are asked.
    pub fn per_user(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (u, q) in &self.order {
            out.entry(u.as_str()).or_default().push(*q);
        }
        out
    }
}

/// Assigns ⌊ρN⌋ seeded-random queries to every user and deals the rest
/// round-robin, so no non-global query reaches two users. The episode
/// order is a seeded shuffle of all assignments.
pub fn generate_workload(
    n_queries: usize,
    users: &[String],
    overlap: f64,
    seed: u64,
) -> Result<Workload, ScenarioError> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(ScenarioError::InvalidOverlap(overlap));
    }
    if users.is_empty() {
        return Err(ScenarioError::NoUsers);
    }
    if n_queries == 0 {
        return Err(ScenarioError::InsufficientQueries { requested: 1, available: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n_queries).collect();
    idx.shuffle(&mut rng);
    let n_global = ((overlap * n_queries as f64) + 1e-9).floor() as usize;
    let global: BTreeSet<usize> = idx[..n_global].iter().copied().collect();
    let mut order: Vec<(String, usize)> = Vec::new();
    for &q in &idx[..n_global] {
        order.extend(users.iter().map(|u| (u.clone(), q)));
    }
    for (i, &q) in idx[n_global..].iter().enumerate() {
        order.push((users[i % users.len()].clone(), q));
    }
    order.shuffle(&mut rng);
    Ok(Workload { global, order })
}

/// Splits `text` into sentences and keeps those mentioning a keyword.
pub fn decompose_for_role(text: &str, keywords: &[String]) -> Option<String> {
    let parts: Vec<&str> = text
        .split_inclusive(['.', '?', '!', ';'])
        .map(str::trim)
        .filter(|s| {
            let lower = s.to_lowercase();
            keywords.iter().any(|k| lower.contains(&k.to_lowercase()))
        })
        .collect();
    (!parts.is_empty()).then(|| parts.join(" "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPhase {
    pub label: String,
    pub events: Vec<(Action, Edge)>,
}

/// Everything a run does, in order, independent of how it is driven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub setup: Vec<(Action, Edge)>,
    pub phases: Vec<PlannedPhase>,
    /// Replayed once per phase, with the phase label filled in.
    pub workload: Vec<EpisodeRequest>,
    pub global_queries: BTreeSet<String>,
}

fn graph_diff(
    from: &BTreeSet<(String, String)>,
    to: &BTreeSet<(String, String)>,
) -> Vec<(Action, Edge)> {
    let mut out: Vec<(Action, Edge)> =
        from.difference(to).map(|(u, a)| (Action::Revoke, Edge::user_agent(u, a))).collect();
    out.extend(to.difference(from).map(|(u, a)| (Action::Grant, Edge::user_agent(u, a))));
    out
}

fn edge_set(g: &BTreeMap<String, Vec<String>>) -> BTreeSet<(String, String)> {
    g.iter().flat_map(|(u, list)| list.iter().map(move |a| (u.clone(), a.clone()))).collect()
}

/// The grants applied before any phase: every agent→resource edge, plus
/// the whole user→agent graph when access is static.
pub fn setup_events(cfg: &ScenarioConfig) -> Vec<(Action, Edge)> {
    let mut setup: Vec<(Action, Edge)> = cfg
        .agent_resources
        .iter()
        .flat_map(|(a, rs)| rs.iter().map(move |r| (Action::Grant, Edge::agent_resource(a, r))))
        .collect();
    if let AccessSource::Static { user_agents } = &cfg.access {
        setup.extend(graph_diff(&BTreeSet::new(), &edge_set(user_agents)));
    }
    setup
}

pub fn plan(cfg: &ScenarioConfig) -> Result<Plan, ScenarioError> {
    cfg.validate()?;
    let setup = setup_events(cfg);
    let phases = match &cfg.access {
        AccessSource::Static { .. } => vec![PlannedPhase { label: "all".into(), events: Vec::new() }],
        AccessSource::Phases { phases } => {
            let mut prev = BTreeSet::new();
            phases
                .iter()
                .map(|p| {
                    let next = edge_set(&p.user_agents);
                    let events = graph_diff(&prev, &next);
                    prev = next;
                    PlannedPhase { label: p.label.clone(), events }
                })
                .collect()
        }
        AccessSource::Schedule { schedule } => {
            let agents: Vec<String> = cfg.agents.iter().map(|a| a.id.clone()).collect();
            let generated = generate_schedule(schedule, &cfg.users, &agents)?;
            generated
                .boundaries
                .iter()
                .enumerate()
                .map(|(i, b)| PlannedPhase {
                    label: b.label.clone(),
                    events: generated.phase_events(i).iter().map(|e| (e.action, e.edge.clone())).collect(),
                })
                .collect()
        }
    };

    let (_, queries) = cfg.load_corpus()?;
    let n = match cfg.workload.limit {
        Some(l) if l > queries.len() => {
            return Err(ScenarioError::InsufficientQueries { requested: l, available: queries.len() })
        }
        Some(l) => l,
        None => queries.len(),
    };
    let queries = &queries[..n];
    let (workload, global_queries) = match &cfg.workload.roles {
        None => {
            let w = generate_workload(n, &cfg.users, cfg.workload.overlap, cfg.seed)?;
            let requests = w
                .order
                .iter()
                .map(|(u, qi)| {
                    let q = &queries[*qi];
                    EpisodeRequest {
                        user: u.clone(),
                        query: q.text.clone(),
                        category: Some(q.category.clone()),
                        query_id: Some(q.id.clone()),
                        phase: None,
                        expected: q.answer.clone(),
                    }
                })
                .collect();
            (requests, w.global.iter().map(|&i| queries[i].id.clone()).collect())
        }
        Some(roles) => {
            let mut requests = Vec::new();
            for q in queries {
                for (u, keywords) in roles {
                    if let Some(sub) = decompose_for_role(&q.text, keywords) {
                        requests.push(EpisodeRequest {
                            user: u.clone(),
                            query: sub,
                            category: None,
                            query_id: Some(format!("{}/{u}", q.id)),
                            phase: None,
                            expected: None,
                        });
                    }
                }
            }
            (requests, BTreeSet::new())
        }
    };
    if workload.is_empty() {
        return Err(ScenarioError::InsufficientQueries { requested: 1, available: 0 });
    }
    Ok(Plan { setup, phases, workload, global_queries })
}

impl Plan {
    /// The episodes of phase `i`, labelled.
    pub fn phase_requests(&self, i: usize) -> impl Iterator<Item = EpisodeRequest> + '_ {
        let label = self.phases[i].label.clone();
        self.workload.iter().map(move |r| EpisodeRequest { phase: Some(label.clone()), ..r.clone() })
    }
}

/// Builds the runtime (agents, resources, coordinator, aggregator, judge).
pub fn build_runtime(cfg: &ScenarioConfig, documents: &[Document]) -> Runtime {
    let coordinator: Box<dyn Coordinator> = match &cfg.coordinator {
        CoordinatorSpec::TopicRouter => Box::new(TopicRouter),
        CoordinatorSpec::Scripted { script } => Box::new(ScriptedCoordinator { script: script.clone() }),
        CoordinatorSpec::Remote { endpoint } => Box::new(RemoteCoordinator::new(endpoint.as_str())),
    };
    let aggregator: Box<dyn Aggregator> = match &cfg.aggregator {
        AggregatorSpec::Concat => Box::new(ConcatAggregator),
        AggregatorSpec::Remote { endpoint } => Box::new(RemoteAggregator { client: ChatClient::new(endpoint.as_str()) }),
    };
    let runtime = Runtime::new(cfg.agents.clone(), cfg.resources.clone(), documents, coordinator, aggregator)
        .with_limits(cfg.limits)
        .with_mode(cfg.mode);
    let judge: Option<Box<dyn Judge>> = match &cfg.judge {
        JudgeSpec::None => None,
        JudgeSpec::Contains => Some(Box::new(ContainsJudge)),
        JudgeSpec::Remote { endpoint, prompt } => Some(Box::new(RemoteJudge {
            client: ChatClient::new(endpoint.as_str()),
            system_prompt: prompt.clone(),
        })),
    };
    match judge {
        Some(j) => runtime.with_judge(j),
        None => runtime,
    }
}

/// A fresh substrate with every configured principal registered.
pub fn build_substrate(cfg: &ScenarioConfig, runtime: &Runtime) -> Result<Substrate, ScenarioError> {
    let embedder: Arc<dyn crate::embed::Embedder> = Arc::from(cfg.embedder.build());
    let policies = cfg.policies.clone().unwrap_or_else(PolicySet::default_instantiation);
    let mut s = Substrate::new(embedder, policies, cfg.retrieval);
    for u in &cfg.users {
        s.register(&PrincipalId::user(u.as_str()))?;
    }
    runtime.register_principals(&mut s)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSafety {
    pub label: String,
    pub matrix: AccessMatrix,
    /// Nonzero cells outside the phase's granted edges.
    pub violations: Vec<String>,
}

/// For every phase, the usage matrices and any nonzero cell that the
/// timeline did not grant when the phase's episodes ran.
pub fn phase_safety(substrate: &Substrate, labels: &[String]) -> Vec<PhaseSafety> {
    let records = substrate.audit().records();
    let timeline = substrate.timeline();
    labels
        .iter()
        .map(|label| {
            let matrix = access_matrix(records, &Window::Phase { label: label.clone() });
            let ticks: BTreeSet<Tick> = phase_ticks(records, label);
            let mut violations = Vec::new();
            for (u, a, _) in AccessMatrix::cells(&matrix.user_agent) {
                if let Some(t) = ticks.iter().find(|t| !timeline.is_present(&Edge::user_agent(u, a), **t)) {
                    violations.push(format!("{u} used {a} at {t} without a grant"));
                }
            }
            for (u, r, _) in AccessMatrix::cells(&matrix.user_resource) {
                let reachable = |t: Tick| {
                    timeline.agents_of(u, t).unwrap_or_default().iter().any(|a| {
                        timeline.is_present(&Edge::agent_resource(a.as_str(), r), t)
                    })
                };
                if let Some(t) = ticks.iter().find(|t| !reachable(**t)) {
                    violations.push(format!("{u} reached {r} at {t} through no granted agent"));
                }
            }
            PhaseSafety { label: label.clone(), matrix, violations }
        })
        .collect()
}

/// Ticks at which the phase's invocations happened.
fn phase_ticks(records: &[AuditRecord], label: &str) -> BTreeSet<Tick> {
    let episodes: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.action == AuditAction::EpisodeStart && r.detail_str("phase") == Some(label))
        .filter_map(|r| r.episode)
        .collect();
    records
        .iter()
        .filter(|r| matches!(r.action, AuditAction::AgentInvoke | AuditAction::ResourceInvoke))
        .filter(|r| r.episode.is_some_and(|e| episodes.contains(&e)))
        .map(|r| r.at)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub phase: String,
    pub user: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub query: String,
    pub answer: String,
    pub outcome: String,
    pub agents: Vec<String>,
    pub resource_calls: usize,
}

impl EpisodeSummary {
    fn new(phase: &str, req: &EpisodeRequest, ep: &QueryEpisode) -> Self {
        Self {
            episode: ep.id,
            phase: phase.to_string(),
            user: ep.user.clone(),
            query_id: req.query_id.clone(),
            query: ep.query.clone(),
            answer: ep.answer.clone(),
            outcome: ep.outcome.as_str().to_string(),
            agents: ep.rounds.iter().map(|r| r.trace.agent.clone()).collect(),
            resource_calls: ep.resource_calls(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub audit: PathBuf,
    pub timeline: PathBuf,
    pub store: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub access_matrices: PathBuf,
    pub transcript: PathBuf,
    pub config: PathBuf,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub plan: Plan,
    pub substrate: Substrate,
    pub episodes: Vec<EpisodeSummary>,
    pub metrics: MetricsReport,
    pub safety: Vec<PhaseSafety>,
    pub artifacts: Option<RunArtifacts>,
}

/// Executes the plan through the library and, if `out` is given, writes
/// the run directory.
pub fn run_scenario(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<ScenarioRun, ScenarioError> {
    let plan = plan(cfg)?;
    let (documents, _) = cfg.load_corpus()?;
    let runtime = build_runtime(cfg, &documents);
    let mut substrate = build_substrate(cfg, &runtime)?;
    for (action, edge) in &plan.setup {
        substrate.change(*action, edge.clone())?;
    }
    let mut episodes = Vec::new();
    for (i, phase) in plan.phases.iter().enumerate() {
        for (action, edge) in &phase.events {
            substrate.change(*action, edge.clone())?;
        }
        for req in plan.phase_requests(i) {
            let ep = run_episode(&mut substrate, &runtime, &req)?;
            episodes.push(EpisodeSummary::new(&phase.label, &req, &ep));
        }
    }
    let metrics = compute_metrics(substrate.audit().records(), &Binning::Phase)?;
    let labels: Vec<String> = plan.phases.iter().map(|p| p.label.clone()).collect();
    let safety = phase_safety(&substrate, &labels);
    let mut run = ScenarioRun { config: cfg.clone(), plan, substrate, episodes, metrics, safety, artifacts: None };
    if let Some(dir) = out {
        run.artifacts = Some(write_artifacts(&run, dir)?);
    }
    Ok(run)
}

fn write_artifacts(run: &ScenarioRun, dir: &Path) -> Result<RunArtifacts, ScenarioError> {
    run.substrate.export(dir)?;
    let path = |name: &str| dir.join(name);
    let write = |name: &str, text: String| -> Result<PathBuf, ScenarioError> {
        let p = path(name);
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(p)
    };
    let mut transcript = String::new();
    for e in &run.episodes {
        transcript.push_str(&serde_json::to_string(e).expect("summaries serialize"));
        transcript.push('\n');
    }
    let matrices: BTreeMap<&str, &PhaseSafety> = run.safety.iter().map(|s| (s.label.as_str(), s)).collect();
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        audit: path(crate::substrate::AUDIT_FILE),
        timeline: path(crate::substrate::TIMELINE_FILE),
        store: path(crate::substrate::STORE_FILE),
        metrics_csv: write("metrics.csv", run.metrics.to_csv())?,
        metrics_json: write("metrics.json", run.metrics.to_json())?,
        access_matrices: write(
            "access_matrices.json",
            serde_json::to_string_pretty(&matrices).expect("matrices serialize") + "\n",
        )?,
        transcript: write("transcript.jsonl", transcript)?,
        config: write("config.yaml", run.config.to_yaml())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallComparison {
    pub label: String,
    pub shared: u64,
    pub isolated: u64,
    /// (isolated − shared) / isolated; 0 when isolated is 0.
    pub reduction: f64,
}

impl CallComparison {
    fn new(label: impl Into<String>, shared: u64, isolated: u64) -> Self {
        let reduction = if isolated == 0 { 0.0 } else { (isolated as f64 - shared as f64) / isolated as f64 };
        Self { label: label.into(), shared, isolated, reduction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub bins: Vec<CallComparison>,
    pub total: CallComparison,
    /// Queries asked by every user.
    pub global: CallComparison,
    pub per_query: Vec<CallComparison>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,shared_calls,isolated_calls,reduction\n");
        for c in self.bins.iter().chain([&self.global, &self.total]) {
            let _ = writeln!(out, "{},{},{},{:.6}", c.label, c.shared, c.isolated, c.reduction);
        }
        out
    }
}

/// Runs `cfg` under shared and isolated memory with identical seeds.
pub fn compare_modes(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<(ComparisonReport, ScenarioRun, ScenarioRun), ScenarioError> {
    let sub = |name: &str| out.map(|d| d.join(name));
    let shared = run_scenario(&cfg.clone().with_mode(MemoryMode::Shared), sub("shared").as_deref())?;
    let isolated = run_scenario(&cfg.clone().with_mode(MemoryMode::Isolated), sub("isolated").as_deref())?;
    let bins = shared
        .metrics
        .bins
        .iter()
        .map(|b| {
            let iso = isolated.metrics.bin(&b.label).map_or(0, |x| x.resource_calls);
            CallComparison::new(b.label.clone(), b.resource_calls, iso)
        })
        .collect::<Vec<_>>();
    let s_q = resource_calls_by_query(shared.substrate.audit().records());
    let i_q = resource_calls_by_query(isolated.substrate.audit().records());
    let per_query: Vec<CallComparison> = i_q
        .keys()
        .chain(s_q.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|q| CallComparison::new(q.clone(), s_q.get(q).copied().unwrap_or(0), i_q.get(q).copied().unwrap_or(0)))
        .collect();
    let (gs, gi) = per_query
        .iter()
        .filter(|c| shared.plan.global_queries.contains(&c.label))
        .fold((0, 0), |(s, i), c| (s + c.shared, i + c.isolated));
    let total = CallComparison::new(
        "total",
        bins.iter().map(|b| b.shared).sum(),
        bins.iter().map(|b| b.isolated).sum(),
    );
    let report = ComparisonReport { bins, total, global: CallComparison::new("global", gs, gi), per_query };
    if let Some(dir) = out {
        let p = dir.join("comparison.json");
        fs::write(&p, serde_json::to_string_pretty(&report).expect("serializes") + "\n").map_err(io_err(&p))?;
        let p = dir.join("comparison.csv");
        fs::write(&p, report.to_csv()).map_err(io_err(&p))?;
    }
    Ok((report, shared, isolated))
}

/// JSON line describing a run, for CLI output.
pub fn run_summary(run: &ScenarioRun) -> serde_json::Value {
    json!({
        "name": run.config.name,
        "mode": run.config.mode,
        "episodes": run.episodes.len(),
        "audit_records": run.substrate.audit().len(),
        "fragments": run.substrate.store().len(),
        "safety_violations": run.safety.iter().map(|s| s.violations.len()).sum::<usize>(),
        "bins": run.metrics.bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("u{i}")).collect()
    }

    #[test]
    fn workload_counts() {
        let w = generate_workload(100, &users(5), 0.5, 3).unwrap();
        assert_eq!(w.order.len(), 300);
        assert_eq!(w.global.len(), 50);
        let w = generate_workload(10, &users(5), 0.0, 3).unwrap();
        let mut seen = BTreeSet::new();
        assert!(w.order.iter().all(|(_, q)| seen.insert(*q)));
        let w = generate_workload(10, &users(5), 1.0, 3).unwrap();
        assert!(w.per_user().values().all(|qs| qs.len() == 10));
    }

    #[test]
    fn workload_errors() {
        assert!(matches!(generate_workload(10, &users(2), 1.5, 0), Err(ScenarioError::InvalidOverlap(_))));
        assert!(matches!(generate_workload(10, &[], 0.5, 0), Err(ScenarioError::NoUsers)));
        assert!(matches!(generate_workload(0, &users(2), 0.5, 0), Err(ScenarioError::InsufficientQueries { .. })));
    }

    #[test]
    fn role_decomposition() {
        let kw = vec!["market".to_string()];
        assert_eq!(
            decompose_for_role("Size the market. Estimate cost; pick vendors.", &kw).as_deref(),
            Some("Size the market.")
        );
        assert_eq!(decompose_for_role("Estimate cost.", &kw), None);
    }

    #[test]
    fn synthetic_corpus_shapes() {
        let (docs, qs) = synthetic_corpus(&["energy_fuels".to_string()], 3);
        assert_eq!(docs.len(), 3);
        assert_eq!(qs[1].text, "What is the reference value of energy fuels record 1?");
        let hit = crate::orchestration::corpus_lookup(&docs, &qs[1].text).unwrap();
        assert_eq!(hit.id, "energy_fuels-1");
        assert!(hit.text.ends_with(&format!("{}.", qs[1].answer.as_ref().unwrap())));
    }
}
