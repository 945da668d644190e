//! Offline re-verification of an audit log against the permission timeline
//! and the store snapshot. Every read, invocation and write recorded in the
//! log is re-checked at the tick it happened.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::access::{AccessTimeline, Action, Edge};
use crate::audit::{AuditAction, AuditRecord};
use crate::ids::Tick;
use crate::memory::{first_failed_clause, MemoryStore};
use crate::substrate::DENIED;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub seq: u64,
    pub reason: String,
}

struct Checker<'a> {
    timeline: &'a AccessTimeline,
    store: &'a MemoryStore,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn flag(&mut self, r: &AuditRecord, reason: impl Into<String>) {
        self.out.push(Violation { seq: r.seq, reason: reason.into() });
    }

    fn edge(&mut self, r: &AuditRecord, edge: Edge, at: Tick) -> bool {
        if self.timeline.is_present(&edge, at) {
            true
        } else {
            self.flag(r, format!("{edge} not granted at {at}"));
            false
        }
    }

    fn user_and_agent<'r>(&mut self, r: &'r AuditRecord) -> Option<(&'r str, &'r str)> {
        match (r.actor.user_name(), r.subject_agent()) {
            (Some(u), Some(a)) => Some((u, a)),
            _ => {
                self.flag(r, "record lacks user actor or agent subject");
                None
            }
        }
    }

    fn permission(&mut self, r: &AuditRecord) {
        let Some(edge) = r.edge() else {
            return self.flag(r, "permission record without an edge");
        };
        let action = if r.action == AuditAction::Grant { Action::Grant } else { Action::Revoke };
        let matched = self
            .timeline
            .events()
            .binary_search_by_key(&r.at, |e| e.tick)
            .ok()
            .map(|i| &self.timeline.events()[i])
            .is_some_and(|e| e.action == action && e.edge == edge);
        if !matched {
            self.flag(r, format!("no timeline event {action:?} {edge} at {}", r.at));
        }
    }

    fn read(&mut self, r: &AuditRecord) {
        let Some((user, agent)) = self.user_and_agent(r) else { return };
        if r.detail_str("decision") == Some(DENIED) {
            if self.timeline.is_present(&Edge::user_agent(user, agent), r.at) {
                self.flag(r, format!("read denied although {user} held {agent} at {}", r.at));
            }
            return;
        }
        let Some(id) = r.subject_fragment() else {
            return self.flag(r, "read without fragment subject");
        };
        let Some(fragment) = self.store.get(id) else {
            return self.flag(r, format!("read of unknown fragment {id}"));
        };
        if !self.edge(r, Edge::user_agent(user, agent), r.at) {
            return;
        }
        let (Ok(agents), Ok(resources)) =
            (self.timeline.agents_of(user, r.at), self.timeline.resources_of(agent, r.at))
        else {
            return self.flag(r, "read by unknown principal");
        };
        if let Some(clause) = first_failed_clause(fragment, user, r.at, &agents, &resources) {
            self.flag(r, format!("fragment {id} inadmissible for ({user}, {agent}) at {}: {clause:?}", r.at));
        }
    }

    fn write(&mut self, r: &AuditRecord) {
        let Some((user, agent)) = self.user_and_agent(r) else { return };
        let Some(id) = r.subject_fragment() else {
            return self.flag(r, "write without fragment subject");
        };
        let Some(fragment) = self.store.get(id) else {
            return self.flag(r, format!("write of fragment {id} missing from store"));
        };
        let p = fragment.provenance();
        if p.creator() != user || p.created_at() != r.at || !p.agents().contains(agent) {
            self.flag(r, format!("provenance of {id} disagrees with its write record"));
        }
        self.edge(r, Edge::user_agent(user, agent), r.at);
    }

    fn invoke(&mut self, r: &AuditRecord) {
        let Some((user, agent)) = self.user_and_agent(r) else { return };
        self.edge(r, Edge::user_agent(user, agent), r.at);
        if r.action == AuditAction::ResourceInvoke {
            match r.subject_resource() {
                Some(res) => {
                    self.edge(r, Edge::agent_resource(agent, res), r.at);
                }
                None => self.flag(r, "resource invocation without resource subject"),
            }
        }
    }
}

/// Returns every violation found; an honest run yields none.
pub fn verify(
    records: &[AuditRecord],
    timeline: &AccessTimeline,
    store: &MemoryStore,
) -> Vec<Violation> {
    let mut c = Checker { timeline, store, out: Vec::new() };
    let mut last = Tick::ZERO;
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 {
            c.flag(r, format!("sequence gap: expected {i}"));
        }
        if r.at < last {
            c.flag(r, "tick decreases");
        }
        last = last.max(r.at);
        match r.action {
            AuditAction::Grant | AuditAction::Revoke => c.permission(r),
            AuditAction::FragmentRead => c.read(r),
            AuditAction::FragmentWrite => c.write(r),
            AuditAction::AgentInvoke | AuditAction::ResourceInvoke => c.invoke(r),
            AuditAction::EpisodeStart | AuditAction::EpisodeEnd => {}
        }
    }
    let logged: BTreeSet<Tick> = records
        .iter()
        .filter(|r| matches!(r.action, AuditAction::Grant | AuditAction::Revoke))
        .map(|r| r.at)
        .collect();
    for e in timeline.events() {
        if !logged.contains(&e.tick) {
            c.out.push(Violation {
                seq: u64::MAX,
                reason: format!("timeline event at {} has no audit record", e.tick),
            });
        }
    }
    c.out
}
