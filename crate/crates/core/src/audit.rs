//! Append-only audit log.
//!
//! Every permission change, fragment read/write, agent and resource
//! invocation, and episode boundary is one record. Records carry a gap-free
//! sequence number and the logical tick at which they happened, and are
//! written as JSON lines, flushed per record when a file sink is attached.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::access::Edge;
use crate::ids::{PrincipalId, PrincipalKind, Tick};
use crate::memory::FragmentId;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("record at {at} precedes previous record at {latest}")]
    NonMonotonicTimestamp { at: Tick, latest: Tick },
    #[error("audit line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("audit sequence gap at line {line}: expected {expected}, found {found}")]
    SequenceGap { line: usize, expected: u64, found: u64 },
    #[error("audit io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Grant,
    Revoke,
    FragmentWrite,
    FragmentRead,
    AgentInvoke,
    ResourceInvoke,
    EpisodeStart,
    EpisodeEnd,
}

/// Who performed an action: a principal, or the substrate itself (permission
/// administration).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    System,
    Principal(PrincipalId),
}

impl Actor {
    pub fn user(name: &str) -> Self {
        Actor::Principal(PrincipalId::user(name))
    }

    pub fn user_name(&self) -> Option<&str> {
        match self {
            Actor::Principal(p) if p.kind() == PrincipalKind::User => Some(p.name()),
            _ => None,
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::System => f.write_str("system"),
            Actor::Principal(p) => p.fmt(f),
        }
    }
}

/// Object of an action: a principal or a fragment. Text form `kind:name`
/// with kind one of user, agent, resource, fragment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subject {
    Principal(PrincipalId),
    Fragment(FragmentId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Principal(p) => p.fmt(f),
            Subject::Fragment(id) => write!(f, "fragment:{id}"),
        }
    }
}

impl FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = s.strip_prefix("fragment:") {
            return Ok(Subject::Fragment(FragmentId::new(id)));
        }
        s.parse().map(Subject::Principal).map_err(|e| e.to_string())
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "system" {
            return Ok(Actor::System);
        }
        s.parse().map(Actor::Principal).map_err(|e| e.to_string())
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Actor);
string_serde!(Subject);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub at: Tick,
    pub actor: Actor,
    pub action: AuditAction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<Subject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, Value>,
}

impl AuditRecord {
    /// A record whose `seq` is assigned on append.
    pub fn new(at: Tick, actor: Actor, action: AuditAction) -> Self {
        Self { seq: 0, at, actor, action, subjects: Vec::new(), episode: None, detail: BTreeMap::new() }
    }

    pub fn subject(mut self, subject: Subject) -> Self {
        self.subjects.push(subject);
        self
    }

    pub fn principal(self, id: PrincipalId) -> Self {
        self.subject(Subject::Principal(id))
    }

    pub fn fragment(self, id: FragmentId) -> Self {
        self.subject(Subject::Fragment(id))
    }

    pub fn episode(mut self, episode: Option<u64>) -> Self {
        self.episode = episode;
        self
    }

    pub fn detail(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }

    pub fn for_edge(at: Tick, action: AuditAction, edge: &Edge) -> Self {
        let ((lk, l), (rk, r)) = edge.endpoints();
        let id = |k, n: &str| PrincipalId::new(k, n).expect("edge endpoints are non-empty");
        Self::new(at, Actor::System, action).principal(id(lk, l)).principal(id(rk, r))
    }

    fn subject_name(&self, kind: PrincipalKind) -> Option<&str> {
        self.subjects.iter().find_map(|s| match s {
            Subject::Principal(p) if p.kind() == kind => Some(p.name()),
            _ => None,
        })
    }

    pub fn subject_agent(&self) -> Option<&str> {
        self.subject_name(PrincipalKind::Agent)
    }

    pub fn subject_resource(&self) -> Option<&str> {
        self.subject_name(PrincipalKind::Resource)
    }

    pub fn subject_user(&self) -> Option<&str> {
        self.subject_name(PrincipalKind::User)
    }

    pub fn subject_fragment(&self) -> Option<&FragmentId> {
        self.subjects.iter().find_map(|s| match s {
            Subject::Fragment(id) => Some(id),
            _ => None,
        })
    }

    /// The edge named by a grant/revoke record.
    pub fn edge(&self) -> Option<Edge> {
        match (self.subject_user(), self.subject_agent(), self.subject_resource()) {
            (Some(u), Some(a), None) => Some(Edge::user_agent(u, a)),
            (None, Some(a), Some(r)) => Some(Edge::agent_resource(a, r)),
            _ => None,
        }
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<BufWriter<File>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirrors every appended record to `path`.
    pub fn attach_file(&mut self, path: &Path) -> Result<(), AuditError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.sink = Some(BufWriter::new(file));
        Ok(())
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, seq: u64) -> &[AuditRecord] {
        let start = (seq as usize).min(self.records.len());
        &self.records[start..]
    }

    pub fn latest_tick(&self) -> Option<Tick> {
        self.records.last().map(|r| r.at)
    }

    /// Assigns the next sequence number and appends.
    pub fn append(&mut self, mut record: AuditRecord) -> Result<u64, AuditError> {
        if let Some(latest) = self.latest_tick() {
            if record.at < latest {
                return Err(AuditError::NonMonotonicTimestamp { at: record.at, latest });
            }
        }
        record.seq = self.records.len() as u64;
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut *sink, &record).map_err(std::io::Error::from)?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }

    pub fn to_jsonl(&self) -> String {
        records_to_jsonl(&self.records)
    }

    /// Parses a log, checking that sequence numbers start at 0 without gaps
    /// and ticks never decrease.
    pub fn from_jsonl(text: &str) -> Result<Self, AuditError> {
        let mut log = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: AuditRecord = serde_json::from_str(line)
                .map_err(|e| AuditError::Parse { line: i + 1, message: e.to_string() })?;
            let expected = log.records.len() as u64;
            if record.seq != expected {
                return Err(AuditError::SequenceGap { line: i + 1, expected, found: record.seq });
            }
            log.append(record)?;
        }
        Ok(log)
    }
}

pub fn records_to_jsonl(records: &[AuditRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_numbers_start_at_zero() {
        let mut log = AuditLog::new();
        let a = log.append(AuditRecord::new(Tick(1), Actor::System, AuditAction::Grant)).unwrap();
        let b = log.append(AuditRecord::new(Tick(1), Actor::System, AuditAction::Grant)).unwrap();
        assert_eq!((a, b), (0, 1));
    }

    #[test]
    fn ticks_may_not_go_backwards() {
        let mut log = AuditLog::new();
        log.append(AuditRecord::new(Tick(5), Actor::System, AuditAction::Grant)).unwrap();
        assert!(matches!(
            log.append(AuditRecord::new(Tick(4), Actor::System, AuditAction::Revoke)),
            Err(AuditError::NonMonotonicTimestamp { at: Tick(4), latest: Tick(5) })
        ));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn wire_format_round_trips() {
        let mut log = AuditLog::new();
        log.append(AuditRecord::for_edge(Tick(1), AuditAction::Grant, &Edge::user_agent("u1", "a1")))
            .unwrap();
        log.append(
            AuditRecord::new(Tick(3), Actor::user("u1"), AuditAction::FragmentRead)
                .principal(PrincipalId::agent("a1"))
                .fragment(FragmentId::new("f-1"))
                .episode(Some(0))
                .detail("list", "cross"),
        )
        .unwrap();
        let text = log.to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"seq":0,"at":1,"actor":"system","action":"grant","subjects":["user:u1","agent:a1"]}"#
        );
        let back = AuditLog::from_jsonl(&text).unwrap();
        assert_eq!(back.records(), log.records());
        assert_eq!(back.records()[0].edge(), Some(Edge::user_agent("u1", "a1")));
        assert_eq!(back.records()[1].subject_fragment(), Some(&FragmentId::new("f-1")));
    }

    #[test]
    fn parse_rejects_gaps() {
        let text = concat!(
            r#"{"seq":0,"at":1,"actor":"system","action":"grant"}"#,
            "\n",
            r#"{"seq":2,"at":1,"actor":"system","action":"grant"}"#,
        );
        assert!(matches!(AuditLog::from_jsonl(text), Err(AuditError::SequenceGap { .. })));
    }

    #[test]
    fn file_sink_mirrors_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let mut log = AuditLog::new();
        log.attach_file(&path).unwrap();
        log.append(AuditRecord::new(Tick(1), Actor::System, AuditAction::Grant)).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_jsonl());
    }
}
