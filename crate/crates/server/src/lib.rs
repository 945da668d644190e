//! HTTP+JSON service over a [`Substrate`].
//!
//! Callers identify themselves with the `x-principal` header: either the
//! configured admin identity or a known principal (`user:alice`,
//! `agent:research`). Handlers hold no state of their own; everything lives
//! in the substrate's timeline, store and audit files, so a restarted
//! service on the same directory resumes where it stopped. Mutations are
//! serialized through one write lock and run on the blocking pool, since
//! remote backends make blocking calls.

use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use collabmem::orchestration::{run_episode, EpisodeRequest, OrchestrationError, Runtime};
use collabmem::scenario::{build_runtime, setup_events, ScenarioConfig, ScenarioError};
use collabmem::{
    AccessError, Action, Edge, InteractionTrace, PolicySet, PrincipalId, PrincipalKind, Substrate,
    SubstrateError, Tick,
};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

pub mod client;

/// Header naming the calling principal.
pub const IDENTITY_HEADER: &str = "x-principal";
/// Header carrying the current tick on line-delimited responses.
pub const TICK_HEADER: &str = "x-tick";
pub const DEFAULT_ADMIN: &str = "admin";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or unknown {IDENTITY_HEADER} identity")]
    Unauthenticated,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("worker task failed: {0}")]
    Join(String),
}

impl ServiceError {
    /// HTTP status and stable error code.
    pub fn classify(&self) -> (StatusCode, &'static str) {
        use SubstrateError as S;
        match self {
            ServiceError::Unauthenticated => (StatusCode::UNAUTHORIZED, "unauthenticated"),
            ServiceError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            ServiceError::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            ServiceError::Substrate(e) | ServiceError::Orchestration(OrchestrationError::Substrate(e)) => match e {
                S::AgentNotPermitted { .. } => (StatusCode::FORBIDDEN, "agent_not_permitted"),
                S::ResourceNotPermitted { .. } => (StatusCode::FORBIDDEN, "resource_not_permitted"),
                S::Access(AccessError::DuplicateEdge(_)) => (StatusCode::CONFLICT, "duplicate_edge"),
                S::Access(AccessError::EdgeNotPresent(_)) => (StatusCode::CONFLICT, "edge_not_present"),
                S::Access(AccessError::UnknownPrincipal(_)) => (StatusCode::BAD_REQUEST, "unknown_principal"),
                S::TraceFromFuture { .. } => (StatusCode::BAD_REQUEST, "validation"),
                S::Embed(collabmem::embed::EmbedError::Remote(_))
                | S::Policy(collabmem::policy::PolicyError::Remote(_)) => {
                    (StatusCode::SERVICE_UNAVAILABLE, "remote_unavailable")
                }
                S::Embed(_) | S::Policy(_) | S::Store(_) => (StatusCode::BAD_REQUEST, "validation"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
            ServiceError::Orchestration(e) if e.is_backend_failure() => {
                (StatusCode::SERVICE_UNAVAILABLE, "remote_unavailable")
            }
            ServiceError::Orchestration(_) => (StatusCode::BAD_REQUEST, "validation"),
            ServiceError::Scenario(_) | ServiceError::Join(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

/// An error plus the tick at which it was observed.
#[derive(Debug)]
pub struct ApiError {
    pub tick: Tick,
    pub error: ServiceError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.error.classify();
        let body = json!({ "tick": self.tick, "error": code, "message": self.error.to_string() });
        (status, Json(body)).into_response()
    }
}

pub struct AppState {
    substrate: RwLock<Substrate>,
    runtime: Runtime,
    admin: String,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").field("admin", &self.admin).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub admin: String,
    /// Apply the scenario's agent→resource (and static user→agent) grants
    /// when the timeline is still empty.
    pub bootstrap: bool,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { admin: DEFAULT_ADMIN.to_string(), bootstrap: false }
    }
}

impl AppState {
    /// Builds the runtime from `cfg` and opens the substrate journaled in
    /// `dir` (in memory when `None`). Every configured principal is
    /// registered.
    pub fn new(cfg: &ScenarioConfig, dir: Option<&Path>, options: ServiceOptions) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let (documents, _) = cfg.load_corpus()?;
        let runtime = build_runtime(cfg, &documents);
        let embedder: Arc<dyn collabmem::Embedder> = Arc::from(cfg.embedder.build());
        let policies = cfg.policies.clone().unwrap_or_else(PolicySet::default_instantiation);
        let mut substrate = match dir {
            Some(dir) => Substrate::open(dir, embedder, policies, cfg.retrieval)?,
            None => Substrate::new(embedder, policies, cfg.retrieval),
        };
        for u in &cfg.users {
            substrate.register(&PrincipalId::user(u.as_str()))?;
        }
        runtime.register_principals(&mut substrate)?;
        if options.bootstrap && substrate.timeline().events().is_empty() {
            for (action, edge) in setup_events(cfg) {
                substrate.change(action, edge)?;
            }
        }
        Ok(Self { substrate: RwLock::new(substrate), runtime, admin: options.admin })
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Substrate> {
        self.substrate.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Substrate> {
        self.substrate.write().unwrap_or_else(|e| e.into_inner())
    }

    fn now(&self) -> Tick {
        self.read().now()
    }

    fn fail(&self, error: impl Into<ServiceError>) -> ApiError {
        ApiError { tick: self.now(), error: error.into() }
    }
}

/// The authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Caller {
    Admin,
    Principal(PrincipalId),
}

impl Caller {
    fn is(&self, kind: PrincipalKind, name: &str) -> bool {
        matches!(self, Caller::Principal(p) if p.kind() == kind && p.name() == name)
    }
}

fn identify(state: &AppState, headers: &HeaderMap) -> Result<Caller, ApiError> {
    let raw = headers
        .get(IDENTITY_HEADER)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| state.fail(ServiceError::Unauthenticated))?;
    if raw == state.admin {
        return Ok(Caller::Admin);
    }
    let id: PrincipalId = raw.parse().map_err(|_| state.fail(ServiceError::Unauthenticated))?;
    if state.read().timeline().principals().contains(&id) {
        Ok(Caller::Principal(id))
    } else {
        Err(state.fail(ServiceError::Unauthenticated))
    }
}

fn require(state: &AppState, allowed: bool, what: &str) -> Result<(), ApiError> {
    if allowed {
        Ok(())
    } else {
        Err(state.fail(ServiceError::Forbidden(format!("caller may not {what}"))))
    }
}

fn body<T>(state: &AppState, payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| state.fail(ServiceError::Validation(e.body_text())))
}

/// Runs `f` against the substrate on the blocking pool.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ServiceError> + Send + 'static,
{
    let st = Arc::clone(state);
    match tokio::task::spawn_blocking(move || f(&st)).await {
        Ok(r) => r.map_err(|e| state.fail(e)),
        Err(e) => Err(state.fail(ServiceError::Join(e.to_string()))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/permissions/grant", post(grant))
        .route("/permissions/revoke", post(revoke))
        .route("/permissions/snapshot", get(snapshot))
        .route("/memory/read", post(memory_read))
        .route("/memory/write", post(memory_write))
        .route("/episodes", post(episodes))
        .route("/audit", get(audit))
        .with_state(state)
}

/// Serves `state` on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "tick": state.now(), "status": "ok" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeBody {
    edge: Edge,
}

async fn grant(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<EdgeBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    change(state, headers, payload, Action::Grant).await
}

async fn revoke(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<EdgeBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    change(state, headers, payload, Action::Revoke).await
}

async fn change(
    state: Arc<AppState>,
    headers: HeaderMap,
    payload: Result<Json<EdgeBody>, JsonRejection>,
    action: Action,
) -> Result<Json<Value>, ApiError> {
    let caller = identify(&state, &headers)?;
    require(&state, caller == Caller::Admin, "administer permissions")?;
    let EdgeBody { edge } = body(&state, payload)?;
    let at = blocking(&state, move |st| Ok(st.write().change(action, edge.clone()).map(|at| (at, edge))?)).await?;
    Ok(Json(json!({ "tick": at.0, "edge": at.1 })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotQuery {
    user: Option<String>,
    agent: Option<String>,
    t: Option<u64>,
}

async fn snapshot(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: Result<Query<SnapshotQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let caller = identify(&state, &headers)?;
    let Query(q) = query.map_err(|e| state.fail(ServiceError::Validation(e.body_text())))?;
    let s = state.read();
    let now = s.now();
    let t = Tick(q.t.unwrap_or(now.0));
    let fail = |error: ServiceError| ApiError { tick: now, error };
    if t > now {
        return Err(fail(ServiceError::Validation(format!("t={t} is ahead of the clock {now}"))));
    }
    let timeline = s.timeline();
    match (q.user, q.agent) {
        (Some(user), None) => {
            if !(caller == Caller::Admin || caller.is(PrincipalKind::User, &user)) {
                return Err(fail(ServiceError::Forbidden("caller may not view this user's grants".into())));
            }
            let agents = timeline.agents_of(&user, t).map_err(|e| fail(SubstrateError::from(e).into()))?;
            Ok(Json(json!({ "tick": now, "t": t, "user": user, "agents": agents })))
        }
        (None, Some(agent)) => {
            if !(caller == Caller::Admin || caller.is(PrincipalKind::Agent, &agent)) {
                return Err(fail(ServiceError::Forbidden("caller may not view this agent's grants".into())));
            }
            let resources = timeline.resources_of(&agent, t).map_err(|e| fail(SubstrateError::from(e).into()))?;
            Ok(Json(json!({ "tick": now, "t": t, "agent": agent, "resources": resources })))
        }
        _ => Err(fail(ServiceError::Validation("give exactly one of user= or agent=".into()))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadBody {
    user: String,
    agent: String,
    query: String,
}

async fn memory_read(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<ReadBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let caller = identify(&state, &headers)?;
    let req = body(&state, payload)?;
    require(
        &state,
        caller == Caller::Admin
            || caller.is(PrincipalKind::User, &req.user)
            || caller.is(PrincipalKind::Agent, &req.agent),
        "read on behalf of this user and agent",
    )?;
    let read = blocking(&state, move |st| Ok(st.write().read_memory(&req.user, &req.agent, &req.query, None)?)).await?;
    Ok(Json(json!({ "tick": read.at, "fragments": read.presented, "view": read.view })))
}

/// A trace as submitted by a client: the server stamps the timestamp.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceBody {
    user: String,
    agent: String,
    subquery: String,
    response: String,
    #[serde(default)]
    resources: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WriteBody {
    trace: TraceBody,
}

async fn memory_write(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<WriteBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let caller = identify(&state, &headers)?;
    let WriteBody { trace } = body(&state, payload)?;
    require(
        &state,
        caller == Caller::Admin
            || caller.is(PrincipalKind::User, &trace.user)
            || caller.is(PrincipalKind::Agent, &trace.agent),
        "write on behalf of this user and agent",
    )?;
    let (tick, ids) = blocking(&state, move |st| {
        let mut s = st.write();
        let trace = InteractionTrace {
            user: trace.user,
            agent: trace.agent,
            timestamp: s.now(),
            subquery: trace.subquery,
            response: trace.response,
            resources: trace.resources,
        };
        let ids = s.encode_and_write(&trace, st.runtime.mode, None)?;
        Ok((s.now(), ids))
    })
    .await?;
    Ok(Json(json!({ "tick": tick, "fragments": ids })))
}

async fn episodes(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<EpisodeRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let caller = identify(&state, &headers)?;
    let req = body(&state, payload)?;
    require(&state, caller == Caller::Admin || caller.is(PrincipalKind::User, &req.user), "run episodes for this user")?;
    let (tick, ep) = blocking(&state, move |st| {
        let mut s = st.write();
        let ep = run_episode(&mut s, &st.runtime, &req)?;
        Ok((s.now(), ep))
    })
    .await?;
    Ok(Json(json!({
        "tick": tick,
        "episode_id": ep.id,
        "answer": ep.answer,
        "outcome": ep.outcome,
        "score": ep.score,
        "resource_calls": ep.resource_calls(),
        "rounds": ep.rounds.len(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditQuery {
    #[serde(default)]
    since_seq: u64,
}

async fn audit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: Result<Query<AuditQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let caller = identify(&state, &headers)?;
    require(&state, caller == Caller::Admin, "export the audit log")?;
    let Query(q) = query.map_err(|e| state.fail(ServiceError::Validation(e.body_text())))?;
    let s = state.read();
    let text = collabmem::audit::records_to_jsonl(s.audit().since(q.since_seq));
    let tick = HeaderValue::from_str(&s.now().0.to_string()).expect("digits are valid header text");
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson")), (header::HeaderName::from_static(TICK_HEADER), tick)],
        text,
    )
        .into_response())
}
