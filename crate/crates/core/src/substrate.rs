//! The single-writer state: permission timeline, fragment store, audit log
//! and the logical clock that orders them.
//!
//! Every mutation (grant, revoke, fragment write) takes the next tick.
//! Reads and invocations are stamped with the current tick. All mutations go
//! through `&mut self`, so readers holding `&Substrate` only ever see fully
//! applied state.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::access::{AccessError, AccessTimeline, Action, Edge, PermissionEvent, Principals};
use crate::audit::{Actor, AuditAction, AuditError, AuditLog, AuditRecord};
use crate::embed::{EmbedError, Embedder};
use crate::ids::{PrincipalId, Tick};
use crate::memory::{FragmentId, MemoryFragment, MemoryStore, Provenance, StoreError, Tier};
use crate::policy::{
    apply_read, plan_writes, Direction, InteractionTrace, MemoryMode, PolicyError, PolicySet,
    PresentedFragment, ViewEntry,
};
use crate::retrieval::{retrieve, RetrievalConfig, RetrievalError, TieredView};

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("user {user} may not invoke agent {agent} at {at}")]
    AgentNotPermitted { user: String, agent: String, at: Tick },
    #[error("agent {agent} may not access resource {resource} at {at}")]
    ResourceNotPermitted { agent: String, resource: String, at: Tick },
    #[error("trace timestamp {trace} is ahead of the clock {now}")]
    TraceFromFuture { trace: Tick, now: Tick },
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SubstrateError + '_ {
    move |source| SubstrateError::Io { path: path.to_path_buf(), source }
}

/// Result of one permission-checked memory read.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRead {
    pub at: Tick,
    pub view: TieredView,
    /// User tier then cross tier, after the read policy.
    pub presented: Vec<PresentedFragment>,
}

/// `decision` detail of a read refused for lack of a user→agent grant.
pub const DENIED: &str = "denied";

pub const PRINCIPALS_FILE: &str = "principals.json";
pub const TIMELINE_FILE: &str = "timeline.jsonl";
pub const STORE_FILE: &str = "store.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";

struct Journal {
    dir: PathBuf,
    timeline: BufWriter<File>,
    store: BufWriter<File>,
}

impl Journal {
    fn line(writer: &mut BufWriter<File>, path: &Path, value: &impl serde::Serialize) -> Result<(), SubstrateError> {
        let mut text = serde_json::to_string(value).expect("journal entries serialize");
        text.push('\n');
        writer.write_all(text.as_bytes()).map_err(io_err(path))?;
        writer.flush().map_err(io_err(path))
    }
}

pub struct Substrate {
    timeline: AccessTimeline,
    store: MemoryStore,
    audit: AuditLog,
    policies: PolicySet,
    retrieval: RetrievalConfig,
    embedder: Arc<dyn Embedder>,
    clock: Tick,
    next_episode: u64,
    journal: Option<Journal>,
}

impl std::fmt::Debug for Substrate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Substrate")
            .field("clock", &self.clock)
            .field("events", &self.timeline.events().len())
            .field("fragments", &self.store.len())
            .field("audit", &self.audit.len())
            .finish()
    }
}

impl Substrate {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        policies: PolicySet,
        retrieval: RetrievalConfig,
    ) -> Self {
        Self {
            timeline: AccessTimeline::new(),
            store: MemoryStore::new(embedder.dimension()),
            audit: AuditLog::new(),
            policies,
            retrieval,
            embedder,
            clock: Tick::ZERO,
            next_episode: 0,
            journal: None,
        }
    }

    /// Opens (or creates) a journaled substrate in `dir`. Existing
    /// principals, timeline, store and audit files are replayed and then
    /// appended to.
    pub fn open(
        dir: &Path,
        embedder: Arc<dyn Embedder>,
        policies: PolicySet,
        retrieval: RetrievalConfig,
    ) -> Result<Self, SubstrateError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let read = |name: &str| -> Result<String, SubstrateError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(SubstrateError::Io { path, source: e }),
            }
        };
        let principals_text = read(PRINCIPALS_FILE)?;
        let principals: Principals = if principals_text.trim().is_empty() {
            Principals::new()
        } else {
            serde_json::from_str(&principals_text).map_err(|e| SubstrateError::Io {
                path: dir.join(PRINCIPALS_FILE),
                source: e.into(),
            })?
        };
        let mut s = Self::new(embedder, policies, retrieval);
        s.timeline = AccessTimeline::from_jsonl(&read(TIMELINE_FILE)?, principals)?;
        s.store = MemoryStore::from_jsonl(&read(STORE_FILE)?, s.embedder.dimension())?;
        s.store.check_principals(s.timeline.principals())?;
        s.audit = AuditLog::from_jsonl(&read(AUDIT_FILE)?)?;
        s.audit.attach_file(&dir.join(AUDIT_FILE))?;
        s.clock = [
            s.timeline.latest_tick(),
            s.store.iter().map(|m| m.provenance().created_at()).max(),
            s.audit.latest_tick(),
        ]
        .into_iter()
        .flatten()
        .max()
        .unwrap_or(Tick::ZERO);
        s.next_episode = s.audit.records().iter().filter_map(|r| r.episode).max().map_or(0, |e| e + 1);
        let append = |name: &str| -> Result<BufWriter<File>, SubstrateError> {
            let path = dir.join(name);
            let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            Ok(BufWriter::new(file))
        };
        s.journal = Some(Journal {
            dir: dir.to_path_buf(),
            timeline: append(TIMELINE_FILE)?,
            store: append(STORE_FILE)?,
        });
        s.write_principals()?;
        Ok(s)
    }

    fn write_principals(&self) -> Result<(), SubstrateError> {
        if let Some(j) = &self.journal {
            let path = j.dir.join(PRINCIPALS_FILE);
            let text = serde_json::to_string_pretty(self.timeline.principals()).expect("serializes");
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn timeline(&self) -> &AccessTimeline {
        &self.timeline
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn retrieval_config(&self) -> &RetrievalConfig {
        &self.retrieval
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn register(&mut self, id: &PrincipalId) -> Result<bool, SubstrateError> {
        let added = self.timeline.register(id);
        if added {
            self.write_principals()?;
        }
        Ok(added)
    }

    fn tick(&mut self) -> Tick {
        self.clock = self.clock.next();
        self.clock
    }

    pub fn grant(&mut self, edge: Edge) -> Result<Tick, SubstrateError> {
        self.change(Action::Grant, edge)
    }

    pub fn revoke(&mut self, edge: Edge) -> Result<Tick, SubstrateError> {
        self.change(Action::Revoke, edge)
    }

    pub fn change(&mut self, action: Action, edge: Edge) -> Result<Tick, SubstrateError> {
        let at = self.clock.next();
        let event = PermissionEvent { tick: at, action, edge };
        let event = self.timeline.apply(event)?.clone();
        self.clock = at;
        if let Some(j) = self.journal.as_mut() {
            let path = j.dir.join(TIMELINE_FILE);
            Journal::line(&mut j.timeline, &path, &event)?;
        }
        let audit_action = match action {
            Action::Grant => AuditAction::Grant,
            Action::Revoke => AuditAction::Revoke,
        };
        self.audit.append(AuditRecord::for_edge(at, audit_action, &event.edge))?;
        Ok(at)
    }

    pub fn agents_of(&self, user: &str) -> Result<std::collections::BTreeSet<String>, SubstrateError> {
        Ok(self.timeline.agents_of(user, self.clock)?)
    }

    pub fn resources_of(&self, agent: &str) -> Result<std::collections::BTreeSet<String>, SubstrateError> {
        Ok(self.timeline.resources_of(agent, self.clock)?)
    }

    pub fn next_episode_id(&mut self) -> u64 {
        let id = self.next_episode;
        self.next_episode += 1;
        id
    }

    /// Appends a non-mutating record stamped with the current tick.
    pub fn record(&mut self, record: AuditRecord) -> Result<u64, SubstrateError> {
        let record = AuditRecord { at: self.clock, ..record };
        Ok(self.audit.append(record)?)
    }

    pub fn ensure_invocable(&self, user: &str, agent: &str) -> Result<(), SubstrateError> {
        if self.timeline.is_present(&Edge::user_agent(user, agent), self.clock) {
            Ok(())
        } else {
            self.timeline.principals().ensure(crate::ids::PrincipalKind::User, user)?;
            self.timeline.principals().ensure(crate::ids::PrincipalKind::Agent, agent)?;
            Err(SubstrateError::AgentNotPermitted {
                user: user.to_string(),
                agent: agent.to_string(),
                at: self.clock,
            })
        }
    }

    /// Retrieves and presents admissible memory for `agent` serving `user`
    /// on `query`. Every surfaced fragment is logged as a read. If `user`
    /// may not invoke `agent` now, a denied read (no fragment subject) is
    /// logged and the call fails.
    pub fn read_memory(
        &mut self,
        user: &str,
        agent: &str,
        query: &str,
        episode: Option<u64>,
    ) -> Result<MemoryRead, SubstrateError> {
        let at = self.clock;
        if let Err(e) = self.ensure_invocable(user, agent) {
            if matches!(e, SubstrateError::AgentNotPermitted { .. }) {
                self.record(
                    AuditRecord::new(at, Actor::user(user), AuditAction::FragmentRead)
                        .principal(PrincipalId::agent(agent))
                        .episode(episode)
                        .detail("decision", DENIED),
                )?;
            }
            return Err(e);
        }
        let embedding = self.embedder.embed(query)?;
        let view =
            retrieve(&self.store, &self.timeline, user, agent, at, &embedding, &self.retrieval)?;
        let entries: Vec<ViewEntry> = view
            .iter()
            .map(|r| {
                let m = self.store.get(&r.id).expect("retrieved ids exist");
                ViewEntry { ranked: r.clone(), key: m.key().to_string(), value: m.value().to_string() }
            })
            .collect();
        let policy = self.policies.resolve(user, agent, at, Direction::Read)?;
        let presented = apply_read(&policy, &entries, user)?;
        for (list, ranked) in view
            .user_tier
            .iter()
            .map(|r| ("user", r))
            .chain(view.cross_tier.iter().map(|r| ("cross", r)))
        {
            self.record(
                AuditRecord::new(at, Actor::user(user), AuditAction::FragmentRead)
                    .principal(PrincipalId::agent(agent))
                    .fragment(ranked.id.clone())
                    .episode(episode)
                    .detail("list", list)
                    .detail("similarity", json!(ranked.similarity)),
            )?;
        }
        Ok(MemoryRead { at, view, presented })
    }

    fn validate_trace(&self, trace: &InteractionTrace) -> Result<(), SubstrateError> {
        if trace.timestamp > self.clock {
            return Err(SubstrateError::TraceFromFuture { trace: trace.timestamp, now: self.clock });
        }
        if !self.timeline.is_present(&Edge::user_agent(&trace.user, &trace.agent), trace.timestamp) {
            self.timeline.principals().ensure(crate::ids::PrincipalKind::User, &trace.user)?;
            return Err(SubstrateError::AgentNotPermitted {
                user: trace.user.clone(),
                agent: trace.agent.clone(),
                at: trace.timestamp,
            });
        }
        let allowed = self.timeline.resources_of(&trace.agent, trace.timestamp)?;
        if let Some(r) = trace.resources.iter().find(|r| !allowed.contains(*r)) {
            return Err(SubstrateError::ResourceNotPermitted {
                agent: trace.agent.clone(),
                resource: r.clone(),
                at: trace.timestamp,
            });
        }
        Ok(())
    }

    /// Encodes `trace` through the write policies and inserts the resulting
    /// fragments. Provenance is (write tick, trace user, {trace agent},
    /// trace resources). Nothing is inserted unless every transformer and
    /// embedding succeeds.
    pub fn encode_and_write(
        &mut self,
        trace: &InteractionTrace,
        mode: MemoryMode,
        episode: Option<u64>,
    ) -> Result<Vec<FragmentId>, SubstrateError> {
        self.validate_trace(trace)?;
        let plan = plan_writes(&self.policies, trace, mode)?;
        let embedded = plan
            .into_iter()
            .map(|c| Ok((self.embedder.embed(&c.key)?, c)))
            .collect::<Result<Vec<_>, SubstrateError>>()?;
        let mut fragments = Vec::with_capacity(embedded.len());
        let mut at = self.clock;
        for (embedding, c) in embedded {
            at = at.next();
            let prov = Provenance::new(at, &trace.user, [&trace.agent], &trace.resources)?;
            fragments.push(MemoryFragment::new(
                FragmentId::for_write(at, c.tier),
                c.tier,
                c.key,
                c.value,
                embedding,
                prov,
            )?);
        }
        let mut ids = Vec::with_capacity(fragments.len());
        for m in fragments {
            let at = self.tick();
            let tier = m.tier();
            let id = self.store.insert(m, self.timeline.principals())?;
            if let Some(j) = self.journal.as_mut() {
                let path = j.dir.join(STORE_FILE);
                Journal::line(&mut j.store, &path, self.store.get(&id).expect("inserted"))?;
            }
            self.audit.append(
                AuditRecord::new(at, Actor::user(&trace.user), AuditAction::FragmentWrite)
                    .principal(PrincipalId::agent(trace.agent.as_str()))
                    .fragment(id.clone())
                    .episode(episode)
                    .detail("tier", tier_str(tier)),
            )?;
            ids.push(id);
        }
        Ok(ids)
    }

    /// Writes principals, timeline, store and audit exports into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), SubstrateError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|source| SubstrateError::Io { path, source })
        };
        write(
            PRINCIPALS_FILE,
            serde_json::to_string_pretty(self.timeline.principals()).expect("serializes"),
        )?;
        write(TIMELINE_FILE, self.timeline.to_jsonl())?;
        write(STORE_FILE, self.store.to_jsonl())?;
        write(AUDIT_FILE, self.audit.to_jsonl())?;
        Ok(())
    }
}

fn tier_str(tier: Tier) -> &'static str {
    tier.as_str()
}
