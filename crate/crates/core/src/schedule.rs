//! Stochastic grant/revoke schedules over the user→agent graph.
//!
//! Each phase drives the edge count to a target by Bernoulli trials: the
//! candidate list (absent edges when granting, present edges when revoking)
//! is shuffled with the seeded RNG and walked, accepting each candidate with
//! probability `p`; the walk repeats with a fresh shuffle until the phase
//! quota is met.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{AccessError, AccessTimeline, Action, Edge, PermissionEvent};
use crate::ids::{PrincipalId, Tick};

pub const DEFAULT_ACCEPT_PROBABILITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("phase {label}: target {target} unreachable (current {current}, capacity {capacity})")]
    UnreachableTarget { label: String, target: usize, current: usize, capacity: usize },
    #[error("acceptance probability must lie in (0, 1], got {0}")]
    InvalidProbability(f64),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("schedule config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub label: String,
    pub target: usize,
    pub action: Action,
}

impl Phase {
    pub fn grant(label: impl Into<String>, target: usize) -> Self {
        Self { label: label.into(), target, action: Action::Grant }
    }

    pub fn revoke(label: impl Into<String>, target: usize) -> Self {
        Self { label: label.into(), target, action: Action::Revoke }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSchedule {
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    pub phases: Vec<Phase>,
}

fn default_p() -> f64 {
    DEFAULT_ACCEPT_PROBABILITY
}

impl GraphSchedule {
    /// Phases labelled `t0, t1, ...`. Targets above the previous count are
    /// grants, below are revokes.
    pub fn from_targets(targets: &[usize], seed: u64, p: f64) -> Self {
        let mut prev = 0;
        let phases = targets
            .iter()
            .enumerate()
            .map(|(i, &target)| {
                let action = if target >= prev { Action::Grant } else { Action::Revoke };
                prev = target;
                Phase { label: format!("t{i}"), target, action }
            })
            .collect();
        Self { seed, p, phases }
    }

    /// The 5→25→5 schedule over a 5×5 universe.
    pub fn five_by_five(seed: u64) -> Self {
        Self::from_targets(&[5, 10, 15, 20, 25, 20, 15, 10, 5], seed, DEFAULT_ACCEPT_PROBABILITY)
    }

    /// Accepts JSON or YAML (JSON is a YAML subset).
    pub fn from_config_str(text: &str) -> Result<Self, ScheduleError> {
        serde_yaml::from_str(text).map_err(|e| ScheduleError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundary {
    pub label: String,
    /// Tick of the last event of the phase (or of the previous phase when
    /// the phase emitted nothing).
    pub tick: Tick,
    pub edges: usize,
    /// Range of `timeline.events()` produced by this phase.
    pub events: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSchedule {
    pub timeline: AccessTimeline,
    pub boundaries: Vec<PhaseBoundary>,
}

impl GeneratedSchedule {
    pub fn phase_events(&self, phase: usize) -> &[PermissionEvent] {
        &self.timeline.events()[self.boundaries[phase].events.clone()]
    }
}

/// Generates the event timeline for `schedule`, starting from an empty
/// user→agent graph. Ticks start at 1 and increase by one per event.
pub fn generate_schedule(
    schedule: &GraphSchedule,
    users: &[String],
    agents: &[String],
) -> Result<GeneratedSchedule, ScheduleError> {
    if !(schedule.p > 0.0 && schedule.p <= 1.0) {
        return Err(ScheduleError::InvalidProbability(schedule.p));
    }
    let mut timeline = AccessTimeline::new();
    for u in users {
        timeline.register(&PrincipalId::user(u.as_str()));
    }
    for a in agents {
        timeline.register(&PrincipalId::agent(a.as_str()));
    }
    let candidates: Vec<Edge> = users
        .iter()
        .flat_map(|u| agents.iter().map(move |a| Edge::user_agent(u, a)))
        .collect();
    let capacity = candidates.len();

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut present: BTreeSet<Edge> = BTreeSet::new();
    let mut tick = Tick::ZERO;
    let mut boundaries = Vec::with_capacity(schedule.phases.len());

    for phase in &schedule.phases {
        let current = present.len();
        let reachable = match phase.action {
            Action::Grant => phase.target > current && phase.target <= capacity,
            Action::Revoke => phase.target < current,
        };
        if !reachable {
            return Err(ScheduleError::UnreachableTarget {
                label: phase.label.clone(),
                target: phase.target,
                current,
                capacity,
            });
        }
        let start = timeline.events().len();
        let mut quota = current.abs_diff(phase.target);
        while quota > 0 {
            let mut pool: Vec<&Edge> = candidates
                .iter()
                .filter(|e| present.contains(*e) == (phase.action == Action::Revoke))
                .collect();
            pool.shuffle(&mut rng);
            for edge in pool {
                if quota == 0 {
                    break;
                }
                if rng.random_bool(schedule.p) {
                    tick = tick.next();
                    timeline.apply(PermissionEvent {
                        tick,
                        action: phase.action,
                        edge: edge.clone(),
                    })?;
                    match phase.action {
                        Action::Grant => present.insert(edge.clone()),
                        Action::Revoke => present.remove(edge),
                    };
                    quota -= 1;
                }
            }
        }
        boundaries.push(PhaseBoundary {
            label: phase.label.clone(),
            tick,
            edges: present.len(),
            events: start..timeline.events().len(),
        });
    }
    Ok(GeneratedSchedule { timeline, boundaries })
}
