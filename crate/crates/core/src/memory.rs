//! Two-tier fragment store with immutable provenance and the admissibility
//! filter.
//!
//! A fragment `m` is admissible for user `u` served by agent `a` at `t` iff
//!
//! * it existed at `t` (`created_at <= t`),
//! * private fragments belong to `u`,
//! * every contributing agent of `m` is one `u` may invoke at `t`, and
//! * every resource touched by `m` is one `a` may access at `t`.
//!
//! Permissions are read at query time, so a revoke hides fragments
//! retroactively.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::access::{AccessError, AccessTimeline, Principals};
use crate::ids::{PrincipalId, PrincipalKind, Tick};

pub const NORM_TOLERANCE: f64 = 1e-6;

const FRAGMENT_NAMESPACE: uuid::Uuid = uuid::Uuid::from_u128(0x6d3f_1c1e_9a0b_4a8e_b1f2_7c55_0e9d_2a41);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("fragment {0} already exists")]
    DuplicateId(FragmentId),
    #[error("embedding has dimension {got}, store expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
    #[error("fragment {0} is empty")]
    EmptyField(&'static str),
    #[error("provenance lists no contributing agent")]
    NoContributingAgent,
    #[error("provenance references unknown principal {0}")]
    UnknownPrincipalInProvenance(PrincipalId),
    #[error("unknown fragment {0}")]
    UnknownFragment(FragmentId),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("store line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FragmentId(String);

impl FragmentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Name-based UUID derived from the write tick and tier, so replays
    /// produce identical ids.
    pub fn for_write(tick: Tick, tier: Tier) -> Self {
        let name = format!("{}/{}", tick.0, tier.as_str());
        Self(uuid::Uuid::new_v5(&FRAGMENT_NAMESPACE, name.as_bytes()).to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Private,
    Shared,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Private => "private",
            Tier::Shared => "shared",
        }
    }
}

/// Creation time, creating user, contributing agents and touched resources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    created_at: Tick,
    creator: String,
    agents: BTreeSet<String>,
    resources: BTreeSet<String>,
}

impl Provenance {
    pub fn new(
        created_at: Tick,
        creator: impl Into<String>,
        agents: impl IntoIterator<Item = impl Into<String>>,
        resources: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, StoreError> {
        let agents: BTreeSet<String> = agents.into_iter().map(Into::into).collect();
        if agents.is_empty() {
            return Err(StoreError::NoContributingAgent);
        }
        let creator = creator.into();
        if creator.is_empty() {
            return Err(StoreError::EmptyField("creator"));
        }
        Ok(Self {
            created_at,
            creator,
            agents,
            resources: resources.into_iter().map(Into::into).collect(),
        })
    }

    pub fn created_at(&self) -> Tick {
        self.created_at
    }

    pub fn creator(&self) -> &str {
        &self.creator
    }

    pub fn agents(&self) -> &BTreeSet<String> {
        &self.agents
    }

    pub fn resources(&self) -> &BTreeSet<String> {
        &self.resources
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("provenance serializes");
        Sha256::digest(&bytes).into()
    }

    fn check_principals(&self, principals: &Principals) -> Result<(), StoreError> {
        let refs = std::iter::once((PrincipalKind::User, &self.creator))
            .chain(self.agents.iter().map(|a| (PrincipalKind::Agent, a)))
            .chain(self.resources.iter().map(|r| (PrincipalKind::Resource, r)));
        for (kind, name) in refs {
            if !principals.is_known(kind, name) {
                let id = PrincipalId::new(kind, name.as_str())
                    .map_err(|_| StoreError::EmptyField("principal name"))?;
                return Err(StoreError::UnknownPrincipalInProvenance(id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFragment {
    id: FragmentId,
    tier: Tier,
    key: String,
    value: String,
    embedding: Vec<f64>,
    provenance: Provenance,
}

impl MemoryFragment {
    pub fn new(
        id: FragmentId,
        tier: Tier,
        key: impl Into<String>,
        value: impl Into<String>,
        embedding: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self, StoreError> {
        let fragment = Self { id, tier, key: key.into(), value: value.into(), embedding, provenance };
        fragment.validate()?;
        Ok(fragment)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.id.0.is_empty() {
            return Err(StoreError::EmptyField("id"));
        }
        if self.key.is_empty() {
            return Err(StoreError::EmptyField("key"));
        }
        if self.value.is_empty() {
            return Err(StoreError::EmptyField("value"));
        }
        if self.provenance.agents.is_empty() {
            return Err(StoreError::NoContributingAgent);
        }
        let norm = self.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(StoreError::NotUnitNorm(norm));
        }
        Ok(())
    }

    pub fn id(&self) -> &FragmentId {
        &self.id
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

/// Clauses of the admissibility test, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clause {
    /// The fragment was written after the query time.
    NotYetCreated,
    /// A private fragment read by someone other than its creator.
    TierOwnership,
    /// A contributing agent is not invocable by the user at `t`.
    AgentSubset,
    /// A touched resource is not accessible to the serving agent at `t`.
    ResourceSubset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissibilityDecision {
    pub fragment: FragmentId,
    pub admitted: bool,
    pub failed_clause: Option<Clause>,
}

/// First failing clause for `fragment` given the user's agent set and the
/// serving agent's resource set at `t`, or `None` if admissible.
pub fn first_failed_clause(
    fragment: &MemoryFragment,
    user: &str,
    t: Tick,
    user_agents: &BTreeSet<String>,
    agent_resources: &BTreeSet<String>,
) -> Option<Clause> {
    let p = &fragment.provenance;
    if p.created_at > t {
        Some(Clause::NotYetCreated)
    } else if fragment.tier == Tier::Private && p.creator != user {
        Some(Clause::TierOwnership)
    } else if !p.agents.is_subset(user_agents) {
        Some(Clause::AgentSubset)
    } else if !p.resources.is_subset(agent_resources) {
        Some(Clause::ResourceSubset)
    } else {
        None
    }
}

/// The fragment universe. Fragments are kept in insertion order; there is no
/// deletion.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    dimension: usize,
    fragments: Vec<MemoryFragment>,
    index: HashMap<FragmentId, usize>,
}

impl MemoryStore {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, fragments: Vec::new(), index: HashMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryFragment> {
        self.fragments.iter()
    }

    pub fn get(&self, id: &FragmentId) -> Option<&MemoryFragment> {
        self.index.get(id).map(|&i| &self.fragments[i])
    }

    pub fn insert(
        &mut self,
        fragment: MemoryFragment,
        principals: &Principals,
    ) -> Result<FragmentId, StoreError> {
        if fragment.embedding.len() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                got: fragment.embedding.len(),
            });
        }
        fragment.validate()?;
        fragment.provenance.check_principals(principals)?;
        self.push(fragment)
    }

    fn push(&mut self, fragment: MemoryFragment) -> Result<FragmentId, StoreError> {
        if self.index.contains_key(&fragment.id) {
            return Err(StoreError::DuplicateId(fragment.id));
        }
        let id = fragment.id.clone();
        self.index.insert(id.clone(), self.fragments.len());
        self.fragments.push(fragment);
        Ok(id)
    }

    /// Admissible fragments for `(user, agent, t)`, in insertion order.
    pub fn admissible_fragments<'a>(
        &'a self,
        timeline: &AccessTimeline,
        user: &str,
        agent: &str,
        t: Tick,
    ) -> Result<Vec<&'a MemoryFragment>, StoreError> {
        let agents = timeline.agents_of(user, t)?;
        let resources = timeline.resources_of(agent, t)?;
        Ok(self
            .fragments
            .iter()
            .filter(|m| first_failed_clause(m, user, t, &agents, &resources).is_none())
            .collect())
    }

    pub fn admissible(
        &self,
        timeline: &AccessTimeline,
        user: &str,
        agent: &str,
        t: Tick,
    ) -> Result<Vec<FragmentId>, StoreError> {
        Ok(self
            .admissible_fragments(timeline, user, agent, t)?
            .into_iter()
            .map(|m| m.id.clone())
            .collect())
    }

    pub fn explain(
        &self,
        timeline: &AccessTimeline,
        user: &str,
        agent: &str,
        t: Tick,
        id: &FragmentId,
    ) -> Result<AdmissibilityDecision, StoreError> {
        let fragment = self.get(id).ok_or_else(|| StoreError::UnknownFragment(id.clone()))?;
        let agents = timeline.agents_of(user, t)?;
        let resources = timeline.resources_of(agent, t)?;
        let failed_clause = first_failed_clause(fragment, user, t, &agents, &resources);
        Ok(AdmissibilityDecision {
            fragment: id.clone(),
            admitted: failed_clause.is_none(),
            failed_clause,
        })
    }

    /// One fragment per line, insertion order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.fragments {
            out.push_str(&serde_json::to_string(m).expect("fragments serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses a snapshot. Principal references are not checked here since a
    /// snapshot may be read without its timeline; see [`MemoryStore::check_principals`].
    pub fn from_jsonl(text: &str, dimension: usize) -> Result<Self, StoreError> {
        let mut store = Self::new(dimension);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |message: String| StoreError::Parse { line: i + 1, message };
            let fragment: MemoryFragment =
                serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
            if fragment.embedding.len() != dimension {
                return Err(StoreError::DimensionMismatch {
                    expected: dimension,
                    got: fragment.embedding.len(),
                });
            }
            fragment.validate().map_err(|e| parse(e.to_string()))?;
            store.push(fragment)?;
        }
        Ok(store)
    }

    /// Reads a snapshot whose dimension is taken from its first fragment.
    pub fn from_jsonl_infer(text: &str) -> Result<Self, StoreError> {
        let dimension = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<MemoryFragment>(l)
                    .map(|m| m.embedding.len())
                    .map_err(|e| StoreError::Parse { line: 1, message: e.to_string() })
            })
            .transpose()?
            .unwrap_or(0);
        Self::from_jsonl(text, dimension)
    }

    pub fn check_principals(&self, principals: &Principals) -> Result<(), StoreError> {
        self.fragments.iter().try_for_each(|m| m.provenance.check_principals(principals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::Edge;

    fn unit(dim: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    fn frag(
        id: &str,
        tier: Tier,
        at: u64,
        creator: &str,
        agents: &[&str],
        resources: &[&str],
    ) -> MemoryFragment {
        let prov = Provenance::new(
            Tick(at),
            creator,
            agents.iter().copied(),
            resources.iter().copied(),
        )
        .unwrap();
        MemoryFragment::new(FragmentId::new(id), tier, "k", "v", unit(4, 0), prov).unwrap()
    }

    fn setup() -> AccessTimeline {
        let mut tl = AccessTimeline::new();
        for id in ["user:u1", "user:u2", "agent:a1", "agent:a2", "resource:r1", "resource:r2"] {
            tl.register(&id.parse().unwrap());
        }
        tl.grant(Edge::user_agent("u1", "a1"), Tick(1)).unwrap();
        tl.grant(Edge::agent_resource("a1", "r1"), Tick(2)).unwrap();
        tl.grant(Edge::user_agent("u2", "a1"), Tick(3)).unwrap();
        tl
    }

    #[test]
    fn insert_then_fetch() {
        let tl = setup();
        let mut store = MemoryStore::new(4);
        let m = frag("f1", Tier::Shared, 4, "u1", &["a1"], &["r1"]);
        let digest = m.provenance().digest();
        let id = store.insert(m.clone(), tl.principals()).unwrap();
        assert_eq!(store.get(&id), Some(&m));
        assert_eq!(store.get(&id).unwrap().provenance().digest(), digest);
        assert_eq!(
            store.insert(m, tl.principals()),
            Err(StoreError::DuplicateId(FragmentId::new("f1")))
        );
    }

    #[test]
    fn insert_validation() {
        let tl = setup();
        let mut store = MemoryStore::new(8);
        let m = frag("f1", Tier::Shared, 4, "u1", &["a1"], &[]);
        assert_eq!(
            store.insert(m, tl.principals()),
            Err(StoreError::DimensionMismatch { expected: 8, got: 4 })
        );
        let mut store = MemoryStore::new(4);
        let ghost = frag("f2", Tier::Shared, 4, "u1", &["a9"], &[]);
        assert_eq!(
            store.insert(ghost, tl.principals()),
            Err(StoreError::UnknownPrincipalInProvenance(PrincipalId::agent("a9")))
        );
        let prov = Provenance::new(Tick(1), "u1", ["a1"], Vec::<String>::new()).unwrap();
        assert!(MemoryFragment::new(FragmentId::new("x"), Tier::Shared, "k", "v", vec![0.5; 4], prov.clone()).is_ok());
        assert!(matches!(
            MemoryFragment::new(FragmentId::new("x"), Tier::Shared, "k", "v", vec![0.4; 4], prov.clone()),
            Err(StoreError::NotUnitNorm(_))
        ));
        assert_eq!(
            MemoryFragment::new(FragmentId::new("x"), Tier::Shared, "", "v", unit(4, 1), prov),
            Err(StoreError::EmptyField("key"))
        );
        assert_eq!(
            Provenance::new(Tick(1), "u1", Vec::<String>::new(), Vec::<String>::new()),
            Err(StoreError::NoContributingAgent)
        );
    }

    #[test]
    fn explain_reports_first_failing_clause() {
        let tl = setup();
        let mut store = MemoryStore::new(4);
        let private_u2 = frag("p2", Tier::Private, 4, "u2", &["a2"], &[]);
        let needs_a2 = frag("s1", Tier::Shared, 4, "u2", &["a2"], &[]);
        let needs_r2 = frag("s2", Tier::Shared, 4, "u2", &["a1"], &["r2"]);
        let fine = frag("s3", Tier::Shared, 4, "u2", &["a1"], &["r1"]);
        let future = frag("s4", Tier::Shared, 9, "u2", &["a1"], &["r1"]);
        for m in [private_u2, needs_a2, needs_r2, fine, future] {
            store.insert(m, tl.principals()).unwrap();
        }
        let t = Tick(5);
        let clause = |id: &str| {
            store.explain(&tl, "u1", "a1", t, &FragmentId::new(id)).unwrap().failed_clause
        };
        assert_eq!(clause("p2"), Some(Clause::TierOwnership));
        assert_eq!(clause("s1"), Some(Clause::AgentSubset));
        assert_eq!(clause("s2"), Some(Clause::ResourceSubset));
        assert_eq!(clause("s3"), None);
        assert_eq!(clause("s4"), Some(Clause::NotYetCreated));
        assert_eq!(store.admissible(&tl, "u1", "a1", t).unwrap(), vec![FragmentId::new("s3")]);
        assert!(matches!(
            store.explain(&tl, "u1", "a1", t, &FragmentId::new("nope")),
            Err(StoreError::UnknownFragment(_))
        ));
    }

    #[test]
    fn empty_provenance_sets_pass_the_subset_clauses() {
        // A(m) = R(m) = ∅ is a subset of anything; checked at the clause level
        // since stored fragments always carry at least one agent.
        let m = frag("s", Tier::Shared, 0, "u1", &["a1"], &[]);
        let mut bare = m.clone();
        bare.provenance.agents.clear();
        let empty = BTreeSet::new();
        assert_eq!(first_failed_clause(&bare, "anyone", Tick(0), &empty, &empty), None);
        assert_eq!(
            first_failed_clause(&m, "anyone", Tick(0), &empty, &empty),
            Some(Clause::AgentSubset)
        );
    }

    #[test]
    fn own_private_fragment_is_visible_to_creator_only() {
        let tl = setup();
        let mut store = MemoryStore::new(4);
        store.insert(frag("p1", Tier::Private, 4, "u1", &["a1"], &["r1"]), tl.principals()).unwrap();
        assert_eq!(store.admissible(&tl, "u1", "a1", Tick(5)).unwrap().len(), 1);
        assert!(store.admissible(&tl, "u2", "a1", Tick(5)).unwrap().is_empty());
    }

    #[test]
    fn jsonl_shape() {
        let tl = setup();
        let mut store = MemoryStore::new(4);
        store.insert(frag("f1", Tier::Shared, 4, "u1", &["a1"], &["r1"]), tl.principals()).unwrap();
        let line = store.to_jsonl();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["tier"], "shared");
        assert_eq!(v["provenance"]["created_at"], 4);
        assert_eq!(v["provenance"]["agents"], serde_json::json!(["a1"]));
        let back = MemoryStore::from_jsonl_infer(&line).unwrap();
        assert_eq!(back.to_jsonl(), line);
        assert_eq!(back.dimension(), 4);
    }

    #[test]
    fn write_ids_are_uuids_and_deterministic() {
        let a = FragmentId::for_write(Tick(12), Tier::Shared);
        assert_eq!(a, FragmentId::for_write(Tick(12), Tier::Shared));
        assert_ne!(a, FragmentId::for_write(Tick(12), Tier::Private));
        assert!(uuid::Uuid::parse_str(a.as_str()).is_ok());
    }
}
