//! The query loop: a coordinator routes a user query to agents round by
//! round, each agent answers from its permitted memory view and resources,
//! and an aggregator synthesizes the final reply.
//!
//! The runtime never trusts the coordinator: named agents are intersected
//! with the user's current agent set, and agents reach resources only
//! through a [`Toolbox`] that checks the agent's current resource set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{Actor, AuditAction, AuditRecord};
use crate::ids::{PrincipalId, PrincipalKind, Tick};
use crate::memory::FragmentId;
use crate::policy::{InteractionTrace, MemoryMode, PolicyError, PresentedFragment};
use crate::prompts::{AGENT_MEMORY_FIRST, AGGREGATOR_PROMPT, COORDINATOR_PROMPT, NO_AGENTS_ANSWER};
use crate::remote::{post_json, ChatClient, RemoteError};
use crate::substrate::{MemoryRead, Substrate, SubstrateError};

/// Similarity at or above which a memory hit counts as an exact repeat.
pub const EXACT_HIT: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("agent {agent} is not configured")]
    UnknownAgent { agent: String },
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("malformed coordinator message: {0}")]
    Protocol(String),
}

impl OrchestrationError {
    /// Failures of remote backends end an episode instead of aborting a run.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            OrchestrationError::Remote(_)
                | OrchestrationError::Substrate(SubstrateError::Policy(PolicyError::Remote(_)))
                | OrchestrationError::Substrate(SubstrateError::Embed(crate::embed::EmbedError::Remote(_)))
        )
    }
}

/// One coordinator decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoordinationMessage {
    Route { agent: String, subquery: String },
    Stop { stop: bool },
}

impl CoordinationMessage {
    pub fn route(agent: impl Into<String>, subquery: impl Into<String>) -> Self {
        CoordinationMessage::Route { agent: agent.into(), subquery: subquery.into() }
    }

    pub fn stop() -> Self {
        CoordinationMessage::Stop { stop: true }
    }

    /// Parses the wire form, tolerating surrounding prose around one JSON
    /// object (remote models often wrap it).
    pub fn parse(raw: &str) -> Result<Self, OrchestrationError> {
        let trimmed = raw.trim();
        let body = match (trimmed.find('{'), trimmed.rfind('}')) {
            (Some(s), Some(e)) if s < e => &trimmed[s..=e],
            _ => return Err(OrchestrationError::Protocol(format!("no JSON object in {trimmed:?}"))),
        };
        let value: Value = serde_json::from_str(body)
            .map_err(|e| OrchestrationError::Protocol(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| OrchestrationError::Protocol("not an object".into()))?;
        match (obj.get("agent"), obj.get("subquery"), obj.get("stop")) {
            (Some(Value::String(a)), Some(Value::String(s)), None) if !a.is_empty() => {
                Ok(CoordinationMessage::route(a.clone(), s.clone()))
            }
            (None, None, Some(Value::Bool(true))) => Ok(CoordinationMessage::stop()),
            _ => Err(OrchestrationError::Protocol(format!("unexpected shape {body}"))),
        }
    }

    pub fn to_wire(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub category: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentBackend {
    /// Memory-first: answer from an exact memory hit, otherwise call
    /// `resource` once with the subquery.
    Scripted {
        #[serde(default)]
        resource: Option<String>,
    },
    Remote {
        endpoint: String,
        #[serde(default)]
        system_prompt: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub specialization: String,
    /// Query categories this agent serves; used by the topic router.
    #[serde(default)]
    pub topics: Vec<String>,
    pub backend: AgentBackend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResourceBackend {
    /// Lookup over the documents of one category.
    Corpus { category: String },
    /// `{"resource": id, "args": {...}}` → `{"output": text}`
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub id: String,
    pub kind: String,
    #[serde(default = "default_schema")]
    pub schema: Value,
    pub backend: ResourceBackend,
}

fn default_schema() -> Value {
    json!({"type": "object", "properties": {"query": {"type": "string"}}, "required": ["query"]})
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
enum Resource {
    Corpus(Vec<Document>),
    Remote(String),
}

impl Resource {
    fn invoke(&self, id: &str, args: &Value) -> Result<String, OrchestrationError> {
        match self {
            Resource::Corpus(docs) => {
                let query = args.get("query").and_then(Value::as_str).unwrap_or_default();
                Ok(corpus_lookup(docs, query).map_or_else(
                    || "No matching document.".to_string(),
                    |d| d.text.clone(),
                ))
            }
            Resource::Remote(endpoint) => {
                #[derive(Deserialize)]
                struct Output {
                    output: String,
                }
                let out: Output = post_json(endpoint, &json!({"resource": id, "args": args}))?;
                Ok(out.output)
            }
        }
    }
}

/// Substring match first, then greatest token overlap; ties go to the
/// earliest document.
pub fn corpus_lookup<'a>(docs: &'a [Document], query: &str) -> Option<&'a Document> {
    let q = query.trim().to_lowercase();
    if q.is_empty() {
        return None;
    }
    if let Some(d) = docs.iter().find(|d| d.text.to_lowercase().contains(&q)) {
        return Some(d);
    }
    let qt = tokens(&q);
    let mut best: Option<(&Document, usize)> = None;
    for d in docs {
        let score = tokens(&d.text).intersection(&qt).count();
        if score > 0 && best.is_none_or(|(_, s)| score > s) {
            best = Some((d, score));
        }
    }
    best.map(|(d, _)| d)
}

/// What the coordinator sees each round.
#[derive(Debug, Clone, Serialize)]
pub struct CoordinatorContext<'a> {
    pub user: &'a str,
    pub query: &'a str,
    pub category: Option<&'a str>,
    pub agents: Vec<&'a AgentSpec>,
    pub history: &'a [Round],
    /// Coordinator calls already made in this episode, including rejected ones.
    pub calls: usize,
    /// Why the previous message was rejected, if it was.
    pub rejection: Option<String>,
}

pub trait Coordinator: Send + Sync {
    /// Returns the raw wire message.
    fn next(&self, ctx: &CoordinatorContext<'_>) -> Result<String, OrchestrationError>;
}

/// Routes to each accessible agent whose topics include the query category
/// (or, without a category, a topic named in the query text), in id order,
/// with the query itself as subquery; then stops.
#[derive(Debug, Clone, Copy, Default)]
pub struct TopicRouter;

impl Coordinator for TopicRouter {
    fn next(&self, ctx: &CoordinatorContext<'_>) -> Result<String, OrchestrationError> {
        let used: BTreeSet<&str> = ctx.history.iter().map(|r| r.trace.agent.as_str()).collect();
        let query = ctx.query.to_lowercase();
        let serves = |topic: &String| match ctx.category {
            Some(c) => topic == c,
            None => query.contains(&topic.replace('_', " ").to_lowercase()),
        };
        let next = ctx
            .agents
            .iter()
            .find(|a| !used.contains(a.id.as_str()) && a.topics.iter().any(serves));
        Ok(match next {
            Some(a) => CoordinationMessage::route(&a.id, ctx.query).to_wire(),
            None => CoordinationMessage::stop().to_wire(),
        })
    }
}

/// Replays fixed raw messages in order, one per call; `{"stop": true}` once
/// exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedCoordinator {
    pub script: Vec<String>,
}

impl Coordinator for ScriptedCoordinator {
    fn next(&self, ctx: &CoordinatorContext<'_>) -> Result<String, OrchestrationError> {
        Ok(self.script.get(ctx.calls).cloned().unwrap_or_else(|| CoordinationMessage::stop().to_wire()))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCoordinator {
    pub client: ChatClient,
    pub system_prompt: String,
}

impl RemoteCoordinator {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { client: ChatClient::new(endpoint), system_prompt: COORDINATOR_PROMPT.to_string() }
    }
}

impl Coordinator for RemoteCoordinator {
    fn next(&self, ctx: &CoordinatorContext<'_>) -> Result<String, OrchestrationError> {
        let agents: Vec<Value> = ctx
            .agents
            .iter()
            .map(|a| json!({"id": a.id, "specialization": a.specialization}))
            .collect();
        let history: Vec<Value> = ctx
            .history
            .iter()
            .map(|r| json!({"agent": r.trace.agent, "subquery": r.trace.subquery, "response": r.trace.response}))
            .collect();
        let input = json!({
            "query": ctx.query,
            "agents": agents,
            "history": history,
            "rejection": ctx.rejection,
        });
        Ok(self.client.complete(&self.system_prompt, &input.to_string())?)
    }
}

pub trait Aggregator: Send + Sync {
    fn aggregate(&self, query: &str, pairs: &[(String, String)]) -> Result<String, OrchestrationError>;
}

/// Joins responses in order, one per line.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConcatAggregator;

impl Aggregator for ConcatAggregator {
    fn aggregate(&self, _query: &str, pairs: &[(String, String)]) -> Result<String, OrchestrationError> {
        if pairs.is_empty() {
            return Ok(NO_AGENTS_ANSWER.to_string());
        }
        Ok(pairs.iter().map(|(_, r)| r.as_str()).collect::<Vec<_>>().join("\n"))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteAggregator {
    pub client: ChatClient,
}

impl Aggregator for RemoteAggregator {
    fn aggregate(&self, query: &str, pairs: &[(String, String)]) -> Result<String, OrchestrationError> {
        let pairs: Vec<Value> =
            pairs.iter().map(|(s, r)| json!({"subquery": s, "response": r})).collect();
        let input = json!({"query": query, "pairs": pairs});
        Ok(self.client.complete(AGGREGATOR_PROMPT, &input.to_string())?)
    }
}

/// Scores a final answer in [0, 1].
pub trait Judge: Send + Sync {
    fn score(&self, query: &str, expected: Option<&str>, answer: &str) -> Result<Option<f64>, OrchestrationError>;
}

/// 1 if the expected answer occurs in the final answer (case-insensitive).
#[derive(Debug, Clone, Copy, Default)]
pub struct ContainsJudge;

impl Judge for ContainsJudge {
    fn score(&self, _query: &str, expected: Option<&str>, answer: &str) -> Result<Option<f64>, OrchestrationError> {
        Ok(expected.map(|e| {
            if answer.to_lowercase().contains(&e.to_lowercase()) { 1.0 } else { 0.0 }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteJudge {
    pub client: ChatClient,
    pub system_prompt: String,
}

impl Judge for RemoteJudge {
    fn score(&self, query: &str, expected: Option<&str>, answer: &str) -> Result<Option<f64>, OrchestrationError> {
        let input = json!({"query": query, "expected": expected, "answer": answer});
        let out = self.client.complete(&self.system_prompt, &input.to_string())?;
        let score: f64 = out.trim().parse().map_err(|_| RemoteError::Malformed {
            endpoint: self.client.endpoint.clone(),
            message: format!("score {out:?}"),
        })?;
        Ok(Some(score.clamp(0.0, 1.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Re-asks after a rejected coordinator message before failing.
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// Resource calls a remote agent may make per round.
    #[serde(default = "default_tool_calls")]
    pub max_tool_calls: usize,
}

fn default_max_rounds() -> usize {
    6
}
fn default_retries() -> usize {
    2
}
fn default_tool_calls() -> usize {
    4
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_rounds: default_max_rounds(), retries: default_retries(), max_tool_calls: default_tool_calls() }
    }
}

/// Agents, resources and the pluggable roles of the loop.
pub struct Runtime {
    agents: BTreeMap<String, AgentSpec>,
    resources: BTreeMap<String, (ResourceSpec, Resource)>,
    coordinator: Box<dyn Coordinator>,
    aggregator: Box<dyn Aggregator>,
    judge: Option<Box<dyn Judge>>,
    pub limits: Limits,
    pub mode: MemoryMode,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("agents", &self.agents.keys().collect::<Vec<_>>())
            .field("resources", &self.resources.keys().collect::<Vec<_>>())
            .field("limits", &self.limits)
            .field("mode", &self.mode)
            .finish()
    }
}

impl Runtime {
    /// Corpus resources take the documents of their category.
    pub fn new(
        agents: Vec<AgentSpec>,
        resources: Vec<ResourceSpec>,
        documents: &[Document],
        coordinator: Box<dyn Coordinator>,
        aggregator: Box<dyn Aggregator>,
    ) -> Self {
        let resources = resources
            .into_iter()
            .map(|spec| {
                let imp = match &spec.backend {
                    ResourceBackend::Corpus { category } => Resource::Corpus(
                        documents.iter().filter(|d| &d.category == category).cloned().collect(),
                    ),
                    ResourceBackend::Remote { endpoint } => Resource::Remote(endpoint.clone()),
                };
                (spec.id.clone(), (spec, imp))
            })
            .collect();
        Self {
            agents: agents.into_iter().map(|a| (a.id.clone(), a)).collect(),
            resources,
            coordinator,
            aggregator,
            judge: None,
            limits: Limits::default(),
            mode: MemoryMode::Shared,
        }
    }

    pub fn with_judge(mut self, judge: Box<dyn Judge>) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_limits(mut self, limits: Limits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_mode(mut self, mode: MemoryMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentSpec> {
        self.agents.values()
    }

    pub fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.get(id)
    }

    pub fn resource_specs(&self) -> impl Iterator<Item = &ResourceSpec> {
        self.resources.values().map(|(s, _)| s)
    }

    /// Registers every configured agent and resource as a principal.
    pub fn register_principals(&self, substrate: &mut Substrate) -> Result<(), SubstrateError> {
        for a in self.agents.keys() {
            substrate.register(&PrincipalId::agent(a.as_str()))?;
        }
        for r in self.resources.keys() {
            substrate.register(&PrincipalId::resource(r.as_str()))?;
        }
        Ok(())
    }
}

/// Permission-checked resource access for one agent acting for one user.
pub struct Toolbox<'a> {
    substrate: &'a mut Substrate,
    runtime: &'a Runtime,
    user: &'a str,
    agent: &'a str,
    episode: Option<u64>,
    used: Vec<String>,
    calls: usize,
}

impl Toolbox<'_> {
    /// Resources the agent may use right now.
    pub fn available(&self) -> Result<BTreeSet<String>, SubstrateError> {
        self.substrate.resources_of(self.agent)
    }

    pub fn invoke(&mut self, resource: &str, args: &Value) -> Result<String, OrchestrationError> {
        let at = self.substrate.now();
        if !self.substrate.resources_of(self.agent)?.contains(resource) {
            return Err(SubstrateError::ResourceNotPermitted {
                agent: self.agent.to_string(),
                resource: resource.to_string(),
                at,
            }
            .into());
        }
        let (_, imp) = self
            .runtime
            .resources
            .get(resource)
            .ok_or_else(|| OrchestrationError::UnknownResource(resource.to_string()))?;
        self.substrate.record(
            AuditRecord::new(at, Actor::user(self.user), AuditAction::ResourceInvoke)
                .principal(PrincipalId::agent(self.agent))
                .principal(PrincipalId::resource(resource))
                .episode(self.episode),
        )?;
        self.calls += 1;
        if !self.used.iter().any(|r| r == resource) {
            self.used.push(resource.to_string());
        }
        imp.invoke(resource, args)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

/// Produces the agent's response for one subquery.
pub fn agent_respond(
    spec: &AgentSpec,
    subquery: &str,
    read: &MemoryRead,
    tools: &mut Toolbox<'_>,
) -> Result<String, OrchestrationError> {
    match &spec.backend {
        AgentBackend::Scripted { resource } => scripted_respond(resource.as_deref(), subquery, read, tools),
        AgentBackend::Remote { endpoint, system_prompt } => {
            remote_respond(spec, endpoint, system_prompt.as_deref(), subquery, read, tools)
        }
    }
}

fn scripted_respond(
    resource: Option<&str>,
    subquery: &str,
    read: &MemoryRead,
    tools: &mut Toolbox<'_>,
) -> Result<String, OrchestrationError> {
    if let Some(hit) = read.presented.iter().find(|p| p.similarity >= EXACT_HIT) {
        return Ok(hit.value.clone());
    }
    // Asserted: scripted agents only call what the toolbox currently allows.
    match resource {
        Some(r) if tools.available()?.contains(r) => tools.invoke(r, &json!({ "query": subquery })),
        _ => Ok(format!("No resource available to answer: {subquery}")),
    }
}

fn memory_json(presented: &[PresentedFragment]) -> Vec<Value> {
    presented
        .iter()
        .map(|p| json!({"tier": p.tier, "key": p.key, "value": p.value, "similarity": p.similarity}))
        .collect()
}

/// Remote agents see their memory view and permitted tool schemas; each
/// reply is either `{"answer": text}` or `{"call": resource, "args": {...}}`.
fn remote_respond(
    spec: &AgentSpec,
    endpoint: &str,
    system_prompt: Option<&str>,
    subquery: &str,
    read: &MemoryRead,
    tools: &mut Toolbox<'_>,
) -> Result<String, OrchestrationError> {
    let client = ChatClient::new(endpoint);
    let system = match system_prompt {
        Some(p) => p.to_string(),
        None => format!("{} {}", spec.specialization, AGENT_MEMORY_FIRST),
    };
    let permitted = tools.available()?;
    let schemas: Vec<Value> = tools
        .runtime
        .resource_specs()
        .filter(|r| permitted.contains(&r.id))
        .map(|r| json!({"id": r.id, "kind": r.kind, "schema": r.schema}))
        .collect();
    let mut results: Vec<Value> = Vec::new();
    loop {
        let input = json!({
            "subquery": subquery,
            "memory": memory_json(&read.presented),
            "tools": schemas,
            "results": results,
        });
        let out = client.complete(&system, &input.to_string())?;
        let parsed: Option<Value> = serde_json::from_str(out.trim()).ok();
        let call = parsed.as_ref().and_then(|v| {
            Some((v.get("call")?.as_str()?.to_string(), v.get("args").cloned().unwrap_or(Value::Null)))
        });
        match call {
            Some((resource, args)) if tools.calls() < tools.runtime.limits.max_tool_calls => {
                let output = tools.invoke(&resource, &args)?;
                results.push(json!({"call": resource, "output": output}));
            }
            _ => {
                return Ok(parsed
                    .as_ref()
                    .and_then(|v| v.get("answer")?.as_str().map(str::to_string))
                    .unwrap_or(out));
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRequest {
    pub user: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
}

impl EpisodeRequest {
    pub fn new(user: impl Into<String>, query: impl Into<String>) -> Self {
        Self { user: user.into(), query: query.into(), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// Stopped by the round limit rather than the coordinator.
    RoundLimit,
    NoAccessibleAgents,
    ProtocolViolation,
    BackendFailure,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::RoundLimit => "round_limit",
            Outcome::NoAccessibleAgents => "no_accessible_agents",
            Outcome::ProtocolViolation => "protocol_violation",
            Outcome::BackendFailure => "backend_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub message: CoordinationMessage,
    pub trace: InteractionTrace,
    pub resource_calls: usize,
    pub written: Vec<FragmentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEpisode {
    pub id: u64,
    pub user: String,
    pub query: String,
    pub started_at: Tick,
    pub rounds: Vec<Round>,
    pub answer: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryEpisode {
    pub fn resource_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.resource_calls).sum()
    }

    pub fn distinct_agents(&self) -> usize {
        self.rounds.iter().map(|r| r.trace.agent.as_str()).collect::<BTreeSet<_>>().len()
    }
}

enum RoundResult {
    Stop,
    Route(String, String),
    Violation(String),
}

/// Runs one query episode to completion. Remote backend failures and
/// coordinator violations end the episode with the failure answer; only
/// substrate inconsistencies surface as errors.
pub fn run_episode(
    substrate: &mut Substrate,
    runtime: &Runtime,
    request: &EpisodeRequest,
) -> Result<QueryEpisode, OrchestrationError> {
    if runtime.limits.max_rounds == 0 {
        return Err(OrchestrationError::NoRounds);
    }
    substrate
        .timeline()
        .principals()
        .ensure(PrincipalKind::User, &request.user)
        .map_err(SubstrateError::from)?;
    let id = substrate.next_episode_id();
    let started_at = substrate.now();
    let mut start = AuditRecord::new(started_at, Actor::user(&request.user), AuditAction::EpisodeStart)
        .episode(Some(id))
        .detail("query", request.query.as_str());
    if let Some(q) = &request.query_id {
        start = start.detail("query_id", q.as_str());
    }
    if let Some(p) = &request.phase {
        start = start.detail("phase", p.as_str());
    }
    substrate.record(start)?;

    let mut episode = QueryEpisode {
        id,
        user: request.user.clone(),
        query: request.query.clone(),
        started_at,
        rounds: Vec::new(),
        answer: NO_AGENTS_ANSWER.to_string(),
        outcome: Outcome::Completed,
        score: None,
        error: None,
    };

    match drive(substrate, runtime, request, &mut episode) {
        Ok(()) => {}
        Err(e) if e.is_backend_failure() => {
            episode.outcome = Outcome::BackendFailure;
            episode.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }

    if matches!(episode.outcome, Outcome::Completed | Outcome::RoundLimit) {
        let pairs: Vec<(String, String)> = episode
            .rounds
            .iter()
            .map(|r| (r.trace.subquery.clone(), r.trace.response.clone()))
            .collect();
        match runtime.aggregator.aggregate(&request.query, &pairs) {
            Ok(answer) => episode.answer = answer,
            Err(e) if e.is_backend_failure() => {
                episode.outcome = Outcome::BackendFailure;
                episode.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(judge) = &runtime.judge {
        match judge.score(&request.query, request.expected.as_deref(), &episode.answer) {
            Ok(score) => episode.score = score,
            Err(e) if e.is_backend_failure() => episode.error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }

    let mut end = AuditRecord::new(substrate.now(), Actor::user(&request.user), AuditAction::EpisodeEnd)
        .episode(Some(id))
        .detail("outcome", episode.outcome.as_str())
        .detail("rounds", episode.rounds.len() as u64);
    if let Some(s) = episode.score {
        end = end.detail("score", s);
    }
    substrate.record(end)?;
    Ok(episode)
}

fn drive(
    substrate: &mut Substrate,
    runtime: &Runtime,
    request: &EpisodeRequest,
    episode: &mut QueryEpisode,
) -> Result<(), OrchestrationError> {
    let user = request.user.as_str();
    let mut calls = 0;
    for _ in 0..runtime.limits.max_rounds {
        let accessible = substrate.agents_of(user)?;
        let agents: Vec<&AgentSpec> =
            runtime.agents.values().filter(|a| accessible.contains(&a.id)).collect();
        if agents.is_empty() {
            if episode.rounds.is_empty() {
                episode.outcome = Outcome::NoAccessibleAgents;
            }
            return Ok(());
        }
        let mut rejection = None;
        let mut decision = RoundResult::Stop;
        for _ in 0..=runtime.limits.retries {
            let ctx = CoordinatorContext {
                user,
                query: &request.query,
                category: request.category.as_deref(),
                agents: agents.clone(),
                history: &episode.rounds,
                calls,
                rejection: rejection.clone(),
            };
            calls += 1;
            let raw = runtime.coordinator.next(&ctx)?;
            decision = match CoordinationMessage::parse(&raw) {
                Ok(CoordinationMessage::Stop { .. }) => RoundResult::Stop,
                Ok(CoordinationMessage::Route { agent, subquery }) => {
                    if agents.iter().any(|a| a.id == agent) {
                        RoundResult::Route(agent, subquery)
                    } else {
                        RoundResult::Violation(format!("agent {agent} is not accessible"))
                    }
                }
                Err(e) => RoundResult::Violation(e.to_string()),
            };
            match &decision {
                RoundResult::Violation(reason) => rejection = Some(reason.clone()),
                _ => break,
            }
        }
        let (agent, subquery) = match decision {
            RoundResult::Stop => return Ok(()),
            RoundResult::Violation(reason) => {
                episode.outcome = Outcome::ProtocolViolation;
                episode.error = Some(reason);
                return Ok(());
            }
            RoundResult::Route(a, s) => (a, s),
        };
        let round = invoke_agent(substrate, runtime, user, &agent, &subquery, Some(episode.id))?;
        episode.rounds.push(round);
    }
    episode.outcome = Outcome::RoundLimit;
    Ok(())
}

/// One agent exchange: invocation record, memory read, response, write-back.
pub fn invoke_agent(
    substrate: &mut Substrate,
    runtime: &Runtime,
    user: &str,
    agent: &str,
    subquery: &str,
    episode: Option<u64>,
) -> Result<Round, OrchestrationError> {
    let spec = runtime
        .agent(agent)
        .ok_or_else(|| OrchestrationError::UnknownAgent { agent: agent.to_string() })?;
    substrate.ensure_invocable(user, agent)?;
    let at = substrate.now();
    substrate.record(
        AuditRecord::new(at, Actor::user(user), AuditAction::AgentInvoke)
            .principal(PrincipalId::agent(agent))
            .episode(episode)
            .detail("subquery", subquery),
    )?;
    let read = substrate.read_memory(user, agent, subquery, episode)?;
    let mut tools = Toolbox { substrate, runtime, user, agent, episode, used: Vec::new(), calls: 0 };
    let response = agent_respond(spec, subquery, &read, &mut tools)?;
    let (resources, resource_calls) = (tools.used, tools.calls);
    let trace = InteractionTrace {
        user: user.to_string(),
        agent: agent.to_string(),
        timestamp: at,
        subquery: subquery.to_string(),
        response,
        resources,
    };
    let written = substrate.encode_and_write(&trace, runtime.mode, episode)?;
    Ok(Round { message: CoordinationMessage::route(agent, subquery), trace, resource_calls, written })
}
