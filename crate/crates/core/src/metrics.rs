//! Utilization metrics and access matrices derived from the audit log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditAction, AuditRecord};
use crate::ids::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no episodes in the requested window")]
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "size", rename_all = "snake_case")]
pub enum Binning {
    /// By the `phase` label on each episode start.
    Phase,
    /// Consecutive bins of this many episodes.
    Fixed(usize),
    Single,
}

#[derive(Debug, Clone, Default)]
struct EpisodeStats {
    phase: Option<String>,
    query_id: Option<String>,
    agents: BTreeSet<String>,
    resource_calls: u64,
    user_hits: u64,
    cross_hits: u64,
    score: Option<f64>,
}

/// Per-episode rollup in episode-start order.
fn episodes(records: &[AuditRecord]) -> Vec<(u64, EpisodeStats)> {
    let mut order = Vec::new();
    let mut stats: BTreeMap<u64, EpisodeStats> = BTreeMap::new();
    for r in records {
        let Some(ep) = r.episode else { continue };
        match r.action {
            AuditAction::EpisodeStart => {
                order.push(ep);
                let s = stats.entry(ep).or_default();
                s.phase = r.detail_str("phase").map(str::to_string);
                s.query_id = r.detail_str("query_id").map(str::to_string);
            }
            AuditAction::AgentInvoke => {
                if let Some(a) = r.subject_agent() {
                    stats.entry(ep).or_default().agents.insert(a.to_string());
                }
            }
            AuditAction::ResourceInvoke => stats.entry(ep).or_default().resource_calls += 1,
            AuditAction::FragmentRead if r.detail_str("decision") == Some(crate::substrate::DENIED) => {}
            AuditAction::FragmentRead => {
                let s = stats.entry(ep).or_default();
                match r.detail_str("list") {
                    Some("user") => s.user_hits += 1,
                    _ => s.cross_hits += 1,
                }
            }
            AuditAction::EpisodeEnd => {
                stats.entry(ep).or_default().score =
                    r.detail.get("score").and_then(serde_json::Value::as_f64);
            }
            _ => {}
        }
    }
    order.into_iter().map(|ep| (ep, stats.remove(&ep).unwrap_or_default())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub label: String,
    pub queries: u64,
    pub agent_utilization: f64,
    pub resource_utilization: f64,
    pub user_tier_hits: f64,
    pub cross_tier_hits: f64,
    /// Present only when episodes were scored by a judge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub resource_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub binning: Binning,
    pub bins: Vec<BinMetrics>,
}

impl MetricsReport {
    /// One row per bin and metric: `bin,metric,value,queries`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,metric,value,queries\n");
        for b in &self.bins {
            let mut row = |metric: &str, value: f64| {
                let _ = writeln!(out, "{},{},{:.6},{}", b.label, metric, value, b.queries);
            };
            row("agent_utilization", b.agent_utilization);
            row("resource_utilization", b.resource_utilization);
            row("user_tier_hits", b.user_tier_hits);
            row("cross_tier_hits", b.cross_tier_hits);
            if let Some(acc) = b.accuracy {
                row("accuracy", acc);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn bin(&self, label: &str) -> Option<&BinMetrics> {
        self.bins.iter().find(|b| b.label == label)
    }
}

fn summarize(label: String, eps: &[&EpisodeStats]) -> BinMetrics {
    let n = eps.len() as u64;
    let mean = |f: &dyn Fn(&EpisodeStats) -> f64| eps.iter().map(|e| f(e)).sum::<f64>() / n as f64;
    let scored: Vec<f64> = eps.iter().filter_map(|e| e.score).collect();
    BinMetrics {
        label,
        queries: n,
        agent_utilization: mean(&|e| e.agents.len() as f64),
        resource_utilization: mean(&|e| e.resource_calls as f64),
        user_tier_hits: mean(&|e| e.user_hits as f64),
        cross_tier_hits: mean(&|e| e.cross_hits as f64),
        accuracy: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        resource_calls: eps.iter().map(|e| e.resource_calls).sum(),
    }
}

pub fn compute_metrics(
    records: &[AuditRecord],
    binning: &Binning,
) -> Result<MetricsReport, MetricsError> {
    let eps = episodes(records);
    if eps.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    let mut groups: Vec<(String, Vec<&EpisodeStats>)> = Vec::new();
    for (i, (_, stats)) in eps.iter().enumerate() {
        let label = match binning {
            Binning::Phase => stats.phase.clone().unwrap_or_else(|| "-".to_string()),
            Binning::Fixed(size) => {
                let size = (*size).max(1);
                let start = i / size * size;
                format!("q{}-{}", start, start + size - 1)
            }
            Binning::Single => "all".to_string(),
        };
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(stats),
            None => groups.push((label, vec![stats])),
        }
    }
    Ok(MetricsReport {
        binning: binning.clone(),
        bins: groups.into_iter().map(|(label, eps)| summarize(label, &eps)).collect(),
    })
}

/// Resource calls per query id, summed over episodes.
pub fn resource_calls_by_query(records: &[AuditRecord]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (_, e) in episodes(records) {
        if let Some(q) = e.query_id {
            *out.entry(q).or_insert(0) += e.resource_calls;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum Window {
    All,
    Phase { label: String },
    Ticks { from: Tick, to: Tick },
}

pub type CountMatrix = BTreeMap<String, BTreeMap<String, u64>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessMatrix {
    /// user → agent → invocations
    pub user_agent: CountMatrix,
    /// user → resource → invocations
    pub user_resource: CountMatrix,
}

impl AccessMatrix {
    pub fn is_empty(&self) -> bool {
        self.user_agent.is_empty() && self.user_resource.is_empty()
    }

    pub fn cells(matrix: &CountMatrix) -> impl Iterator<Item = (&str, &str, u64)> {
        matrix
            .iter()
            .flat_map(|(row, cols)| cols.iter().map(move |(col, n)| (row.as_str(), col.as_str(), *n)))
    }
}

pub fn access_matrix(records: &[AuditRecord], window: &Window) -> AccessMatrix {
    let phase_episodes: Option<BTreeSet<u64>> = match window {
        Window::Phase { label } => Some(
            records
                .iter()
                .filter(|r| r.action == AuditAction::EpisodeStart && r.detail_str("phase") == Some(label))
                .filter_map(|r| r.episode)
                .collect(),
        ),
        _ => None,
    };
    let in_window = |r: &AuditRecord| match window {
        Window::All => true,
        Window::Ticks { from, to } => *from <= r.at && r.at <= *to,
        Window::Phase { .. } => r
            .episode
            .is_some_and(|e| phase_episodes.as_ref().is_some_and(|set| set.contains(&e))),
    };
    let mut m = AccessMatrix::default();
    for r in records.iter().filter(|r| in_window(r)) {
        let Some(user) = r.actor.user_name() else { continue };
        let (matrix, col) = match r.action {
            AuditAction::AgentInvoke => (&mut m.user_agent, r.subject_agent()),
            AuditAction::ResourceInvoke => (&mut m.user_resource, r.subject_resource()),
            _ => continue,
        };
        if let Some(col) = col {
            *matrix.entry(user.to_string()).or_default().entry(col.to_string()).or_insert(0) += 1;
        }
    }
    m
}
