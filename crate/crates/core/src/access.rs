//! Time-indexed user→agent and agent→resource permission graphs.
//!
//! The timeline is an append-only log of grant/revoke events. Snapshot
//! queries (`agents_of`, `resources_of`) binary-search a per-edge history
//! instead of materializing a graph per tick.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{PrincipalId, PrincipalKind, Tick};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccessError {
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("edge {0} is already granted")]
    DuplicateEdge(Edge),
    #[error("edge {0} is not present")]
    EdgeNotPresent(Edge),
    #[error("timestamp {at} does not follow latest event at {latest}")]
    NonMonotonicTimestamp { at: Tick, latest: Tick },
    #[error("timeline line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Known users, agents and resources.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principals {
    users: BTreeSet<String>,
    agents: BTreeSet<String>,
    resources: BTreeSet<String>,
}

impl Principals {
    pub fn new() -> Self {
        Self::default()
    }

    fn set(&self, kind: PrincipalKind) -> &BTreeSet<String> {
        match kind {
            PrincipalKind::User => &self.users,
            PrincipalKind::Agent => &self.agents,
            PrincipalKind::Resource => &self.resources,
        }
    }

    /// Returns false if the principal was already known.
    pub fn register(&mut self, id: &PrincipalId) -> bool {
        let set = match id.kind() {
            PrincipalKind::User => &mut self.users,
            PrincipalKind::Agent => &mut self.agents,
            PrincipalKind::Resource => &mut self.resources,
        };
        set.insert(id.name().to_string())
    }

    pub fn contains(&self, id: &PrincipalId) -> bool {
        self.set(id.kind()).contains(id.name())
    }

    pub fn is_known(&self, kind: PrincipalKind, name: &str) -> bool {
        self.set(kind).contains(name)
    }

    pub fn ensure(&self, kind: PrincipalKind, name: &str) -> Result<(), AccessError> {
        if self.is_known(kind, name) {
            Ok(())
        } else {
            Err(AccessError::UnknownPrincipal(unknown(kind, name)))
        }
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.users.iter().map(String::as_str)
    }

    pub fn agents(&self) -> impl Iterator<Item = &str> {
        self.agents.iter().map(String::as_str)
    }

    pub fn resources(&self) -> impl Iterator<Item = &str> {
        self.resources.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = PrincipalId> + '_ {
        let users = self.users.iter().map(|n| PrincipalId::user(n.as_str()));
        let agents = self.agents.iter().map(|n| PrincipalId::agent(n.as_str()));
        let resources = self.resources.iter().map(|n| PrincipalId::resource(n.as_str()));
        users.chain(agents).chain(resources)
    }
}

// Empty names cannot be registered, so an unknown-principal report only needs
// a placeholder for that case.
fn unknown(kind: PrincipalKind, name: &str) -> PrincipalId {
    PrincipalId::new(kind, name)
        .unwrap_or_else(|_| PrincipalId::new(kind, "<empty>").expect("non-empty"))
}

/// One edge of either bipartite graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Edge {
    UserAgent { user: String, agent: String },
    AgentResource { agent: String, resource: String },
}

impl Edge {
    pub fn user_agent(user: impl Into<String>, agent: impl Into<String>) -> Self {
        Edge::UserAgent { user: user.into(), agent: agent.into() }
    }

    pub fn agent_resource(agent: impl Into<String>, resource: impl Into<String>) -> Self {
        Edge::AgentResource { agent: agent.into(), resource: resource.into() }
    }

    /// (left, right) endpoints with their kinds.
    pub fn endpoints(&self) -> ((PrincipalKind, &str), (PrincipalKind, &str)) {
        match self {
            Edge::UserAgent { user, agent } => {
                ((PrincipalKind::User, user), (PrincipalKind::Agent, agent))
            }
            Edge::AgentResource { agent, resource } => {
                ((PrincipalKind::Agent, agent), (PrincipalKind::Resource, resource))
            }
        }
    }

    pub fn is_user_agent(&self) -> bool {
        matches!(self, Edge::UserAgent { .. })
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edge::UserAgent { user, agent } => write!(f, "user:{user}->agent:{agent}"),
            Edge::AgentResource { agent, resource } => {
                write!(f, "agent:{agent}->resource:{resource}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Grant,
    Revoke,
}

/// A single grant or revoke. Line format of the timeline log:
/// `{"tick": n, "action": "grant"|"revoke", "edge": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionEvent {
    pub tick: Tick,
    pub action: Action,
    pub edge: Edge,
}

type History = Vec<(Tick, Action)>;

/// Append-only permission log with snapshot queries.
#[derive(Debug, Clone, Default)]
pub struct AccessTimeline {
    principals: Principals,
    events: Vec<PermissionEvent>,
    // left endpoint -> right endpoint -> history, for each graph
    user_agent: BTreeMap<String, BTreeMap<String, History>>,
    agent_resource: BTreeMap<String, BTreeMap<String, History>>,
}

impl AccessTimeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_principals(principals: Principals) -> Self {
        Self { principals, ..Self::default() }
    }

    pub fn principals(&self) -> &Principals {
        &self.principals
    }

    pub fn register(&mut self, id: &PrincipalId) -> bool {
        self.principals.register(id)
    }

    pub fn events(&self) -> &[PermissionEvent] {
        &self.events
    }

    pub fn latest_tick(&self) -> Option<Tick> {
        self.events.last().map(|e| e.tick)
    }

    pub fn grant(&mut self, edge: Edge, at: Tick) -> Result<&PermissionEvent, AccessError> {
        self.apply(PermissionEvent { tick: at, action: Action::Grant, edge })
    }

    pub fn revoke(&mut self, edge: Edge, at: Tick) -> Result<&PermissionEvent, AccessError> {
        self.apply(PermissionEvent { tick: at, action: Action::Revoke, edge })
    }

    /// Validates and appends one event.
    pub fn apply(&mut self, event: PermissionEvent) -> Result<&PermissionEvent, AccessError> {
        let ((lk, left), (rk, right)) = event.edge.endpoints();
        self.principals.ensure(lk, left)?;
        self.principals.ensure(rk, right)?;
        if let Some(latest) = self.latest_tick() {
            if event.tick <= latest {
                return Err(AccessError::NonMonotonicTimestamp { at: event.tick, latest });
            }
        }
        let present = self.is_present(&event.edge, event.tick);
        match (event.action, present) {
            (Action::Grant, true) => return Err(AccessError::DuplicateEdge(event.edge)),
            (Action::Revoke, false) => return Err(AccessError::EdgeNotPresent(event.edge)),
            _ => {}
        }
        let index = match event.edge {
            Edge::UserAgent { .. } => &mut self.user_agent,
            Edge::AgentResource { .. } => &mut self.agent_resource,
        };
        index
            .entry(left.to_string())
            .or_default()
            .entry(right.to_string())
            .or_default()
            .push((event.tick, event.action));
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    fn history(&self, edge: &Edge) -> Option<&History> {
        let ((_, left), (_, right)) = edge.endpoints();
        let index = match edge {
            Edge::UserAgent { .. } => &self.user_agent,
            Edge::AgentResource { .. } => &self.agent_resource,
        };
        index.get(left)?.get(right)
    }

    /// Whether `edge` is in the graph at time `t` (events with tick ≤ t).
    pub fn is_present(&self, edge: &Edge, t: Tick) -> bool {
        self.history(edge).is_some_and(|h| state_at(h, t))
    }

    /// Agents user `user` may invoke at `t`.
    pub fn agents_of(&self, user: &str, t: Tick) -> Result<BTreeSet<String>, AccessError> {
        self.principals.ensure(PrincipalKind::User, user)?;
        Ok(neighbours(&self.user_agent, user, t))
    }

    /// Resources agent `agent` may access at `t`.
    pub fn resources_of(&self, agent: &str, t: Tick) -> Result<BTreeSet<String>, AccessError> {
        self.principals.ensure(PrincipalKind::Agent, agent)?;
        Ok(neighbours(&self.agent_resource, agent, t))
    }

    /// Every edge of both graphs present at `t`.
    pub fn edges_at(&self, t: Tick) -> BTreeSet<Edge> {
        let ua = self.user_agent.iter().flat_map(|(u, m)| {
            m.iter().filter(|(_, h)| state_at(h, t)).map(move |(a, _)| Edge::user_agent(u, a))
        });
        let ar = self.agent_resource.iter().flat_map(|(a, m)| {
            m.iter().filter(|(_, h)| state_at(h, t)).map(move |(r, _)| Edge::agent_resource(a, r))
        });
        ua.chain(ar).collect()
    }

    pub fn user_agent_edge_count(&self, t: Tick) -> usize {
        self.user_agent.values().flat_map(|m| m.values()).filter(|h| state_at(h, t)).count()
    }

    /// Serializes the event log, one JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses an event log. Endpoints of every edge are registered as known
    /// principals; `principals` may add ones that never appear in an edge.
    pub fn from_jsonl(text: &str, principals: Principals) -> Result<Self, AccessError> {
        let mut timeline = Self::with_principals(principals);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: PermissionEvent = serde_json::from_str(line)
                .map_err(|e| AccessError::Parse { line: i + 1, message: e.to_string() })?;
            let ((lk, left), (rk, right)) = event.edge.endpoints();
            for (kind, name) in [(lk, left), (rk, right)] {
                let id = PrincipalId::new(kind, name)
                    .map_err(|e| AccessError::Parse { line: i + 1, message: e.to_string() })?;
                timeline.principals.register(&id);
            }
            timeline.apply(event)?;
        }
        Ok(timeline)
    }
}

fn state_at(history: &History, t: Tick) -> bool {
    let n = history.partition_point(|(tick, _)| *tick <= t);
    n > 0 && history[n - 1].1 == Action::Grant
}

fn neighbours(
    index: &BTreeMap<String, BTreeMap<String, History>>,
    left: &str,
    t: Tick,
) -> BTreeSet<String> {
    index
        .get(left)
        .map(|m| m.iter().filter(|(_, h)| state_at(h, t)).map(|(r, _)| r.clone()).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe(users: &[&str], agents: &[&str], resources: &[&str]) -> AccessTimeline {
        let mut tl = AccessTimeline::new();
        for u in users {
            tl.register(&PrincipalId::user(*u));
        }
        for a in agents {
            tl.register(&PrincipalId::agent(*a));
        }
        for r in resources {
            tl.register(&PrincipalId::resource(*r));
        }
        tl
    }

    #[test]
    fn grant_is_visible_from_its_tick_onwards() {
        let mut tl = universe(&["u1"], &["a1"], &[]);
        tl.grant(Edge::user_agent("u1", "a1"), Tick(3)).unwrap();
        assert!(tl.agents_of("u1", Tick(3)).unwrap().contains("a1"));
        assert!(!tl.agents_of("u1", Tick(2)).unwrap().contains("a1"));
    }

    #[test]
    fn revoke_hides_edge() {
        let mut tl = universe(&["u1"], &["a1"], &[]);
        let e = Edge::user_agent("u1", "a1");
        tl.grant(e.clone(), Tick(1)).unwrap();
        tl.revoke(e.clone(), Tick(2)).unwrap();
        assert!(tl.agents_of("u1", Tick(1)).unwrap().contains("a1"));
        assert!(tl.agents_of("u1", Tick(5)).unwrap().is_empty());
        // regrant
        tl.grant(e, Tick(7)).unwrap();
        assert!(tl.agents_of("u1", Tick(6)).unwrap().is_empty());
        assert!(tl.agents_of("u1", Tick(7)).unwrap().contains("a1"));
    }

    #[test]
    fn error_paths() {
        let mut tl = universe(&["u1"], &["a1"], &["r1"]);
        let e = Edge::user_agent("u1", "a1");
        assert_eq!(tl.revoke(e.clone(), Tick(1)), Err(AccessError::EdgeNotPresent(e.clone())));
        tl.grant(e.clone(), Tick(2)).unwrap();
        assert_eq!(tl.grant(e.clone(), Tick(3)), Err(AccessError::DuplicateEdge(e.clone())));
        assert_eq!(
            tl.revoke(e.clone(), Tick(2)),
            Err(AccessError::NonMonotonicTimestamp { at: Tick(2), latest: Tick(2) })
        );
        assert_eq!(
            tl.grant(Edge::user_agent("u9", "a1"), Tick(9)),
            Err(AccessError::UnknownPrincipal(PrincipalId::user("u9")))
        );
        // an agent name used in the user slot is still an unknown user
        assert!(matches!(
            tl.grant(Edge::user_agent("a1", "a1"), Tick(9)),
            Err(AccessError::UnknownPrincipal(_))
        ));
        assert!(matches!(tl.agents_of("nobody", Tick(1)), Err(AccessError::UnknownPrincipal(_))));
        assert!(matches!(tl.resources_of("u1", Tick(1)), Err(AccessError::UnknownPrincipal(_))));
    }

    #[test]
    fn empty_timeline_has_empty_snapshots() {
        let tl = universe(&["u1"], &["a1"], &["r1"]);
        assert!(tl.agents_of("u1", Tick(100)).unwrap().is_empty());
        assert!(tl.resources_of("a1", Tick(100)).unwrap().is_empty());
        assert!(tl.edges_at(Tick(100)).is_empty());
    }

    #[test]
    fn jsonl_round_trip_and_wire_shape() {
        let mut tl = universe(&["u1", "u2"], &["a1"], &["r1"]);
        tl.grant(Edge::user_agent("u1", "a1"), Tick(1)).unwrap();
        tl.grant(Edge::agent_resource("a1", "r1"), Tick(2)).unwrap();
        tl.revoke(Edge::user_agent("u1", "a1"), Tick(4)).unwrap();
        let text = tl.to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"tick":1,"action":"grant","edge":{"user":"u1","agent":"a1"}}"#);
        let back = AccessTimeline::from_jsonl(&text, Principals::new()).unwrap();
        assert_eq!(back.events(), tl.events());
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(back.resources_of("a1", Tick(3)).unwrap().len(), 1);
    }

    #[test]
    fn jsonl_rejects_out_of_order_lines() {
        let text = concat!(
            r#"{"tick":5,"action":"grant","edge":{"user":"u1","agent":"a1"}}"#,
            "\n",
            r#"{"tick":4,"action":"revoke","edge":{"user":"u1","agent":"a1"}}"#,
        );
        assert!(matches!(
            AccessTimeline::from_jsonl(text, Principals::new()),
            Err(AccessError::NonMonotonicTimestamp { .. })
        ));
    }
}
