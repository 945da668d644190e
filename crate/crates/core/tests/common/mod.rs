//! Random universes and naive oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use collabmem::{
    AccessTimeline, Action, Edge, FragmentId, MemoryFragment, MemoryStore, PermissionEvent, PrincipalId,
    Provenance, Tick, Tier,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 8;

pub struct Universe {
    pub users: Vec<String>,
    pub agents: Vec<String>,
    pub resources: Vec<String>,
    pub timeline: AccessTimeline,
    pub store: MemoryStore,
    pub horizon: u64,
}

pub fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Up to 5 users/agents/resources, `max_events` valid permission events
/// and `max_fragments` fragments with random provenance.
pub fn universe(seed: u64, max_events: usize, max_fragments: usize) -> Universe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let users = names("u", rng.random_range(1..=5));
    let agents = names("a", rng.random_range(1..=5));
    let resources = names("r", rng.random_range(1..=5));
    let mut timeline = AccessTimeline::new();
    for u in &users {
        timeline.register(&PrincipalId::user(u.as_str()));
    }
    for a in &agents {
        timeline.register(&PrincipalId::agent(a.as_str()));
    }
    for r in &resources {
        timeline.register(&PrincipalId::resource(r.as_str()));
    }
    let n_events = rng.random_range(0..=max_events);
    let mut present = BTreeSet::new();
    let mut tick = 0u64;
    for _ in 0..n_events {
        let edge = if rng.random_bool(0.5) {
            Edge::user_agent(&users[rng.random_range(0..users.len())], &agents[rng.random_range(0..agents.len())])
        } else {
            Edge::agent_resource(&agents[rng.random_range(0..agents.len())], &resources[rng.random_range(0..resources.len())])
        };
        tick += rng.random_range(1..=3);
        let action = if present.contains(&edge) { Action::Revoke } else { Action::Grant };
        timeline.apply(PermissionEvent { tick: Tick(tick), action, edge: edge.clone() }).unwrap();
        if action == Action::Grant {
            present.insert(edge);
        } else {
            present.remove(&edge);
        }
    }
    let horizon = tick + 3;
    let mut store = MemoryStore::new(DIM);
    let n_frag = rng.random_range(0..=max_fragments);
    for i in 0..n_frag {
        let pick = |rng: &mut ChaCha8Rng, pool: &[String], min: usize| -> Vec<String> {
            let mut out: Vec<String> = pool.iter().filter(|_| rng.random_bool(0.35)).cloned().collect();
            if out.len() < min {
                out.push(pool[rng.random_range(0..pool.len())].clone());
            }
            out
        };
        let ags = pick(&mut rng, &agents, 1);
        let res = pick(&mut rng, &resources, 0);
        let creator = users[rng.random_range(0..users.len())].clone();
        let tier = if rng.random_bool(0.5) { Tier::Private } else { Tier::Shared };
        let created = Tick(rng.random_range(0..=horizon));
        let prov = Provenance::new(created, creator, ags, res).unwrap();
        let m = MemoryFragment::new(
            FragmentId::new(format!("m{i:04}")),
            tier,
            format!("key {i}"),
            format!("value {i}"),
            unit(&mut rng, DIM),
            prov,
        )
        .unwrap();
        store.insert(m, timeline.principals()).unwrap();
    }
    Universe { users, agents, resources, timeline, store, horizon }
}

/// Edge state at `t` by replaying every event with tick ≤ t.
pub fn naive_present(events: &[PermissionEvent], edge: &Edge, t: Tick) -> bool {
    let mut on = false;
    for e in events {
        if e.tick <= t && &e.edge == edge {
            on = e.action == Action::Grant;
        }
    }
    on
}

pub fn naive_agents(u: &Universe, user: &str, t: Tick) -> BTreeSet<String> {
    u.agents
        .iter()
        .filter(|a| naive_present(u.timeline.events(), &Edge::user_agent(user, a.as_str()), t))
        .cloned()
        .collect()
}

pub fn naive_resources(u: &Universe, agent: &str, t: Tick) -> BTreeSet<String> {
    u.resources
        .iter()
        .filter(|r| naive_present(u.timeline.events(), &Edge::agent_resource(agent, r.as_str()), t))
        .cloned()
        .collect()
}

/// Clause-by-clause admissibility written independently of the store.
pub fn naive_admissible(u: &Universe, user: &str, agent: &str, t: Tick) -> Vec<FragmentId> {
    let ua = naive_agents(u, user, t);
    let ar = naive_resources(u, agent, t);
    u.store
        .iter()
        .filter(|m| {
            let p = m.provenance();
            let created_ok = p.created_at() <= t;
            let tier_ok = m.tier() == Tier::Shared || p.creator() == user;
            let agents_ok = p.agents().iter().all(|a| ua.contains(a));
            let resources_ok = p.resources().iter().all(|r| ar.contains(r));
            created_ok && tier_ok && agents_ok && resources_ok
        })
        .map(|m| m.id().clone())
        .collect()
}

/// Brute force: filter by the naive admissibility oracle and the threshold,
/// sort every candidate, cut each tier at k.
pub fn retrieval_oracle(u: &Universe, user: &str, agent: &str, t: Tick, q: &[f64], cfg: &collabmem::RetrievalConfig) -> (Vec<String>, Vec<String>) {
    let ids = naive_admissible(u, user, agent, t);
    let mut rows: Vec<(f64, u64, String, Tier)> = ids
        .iter()
        .map(|id| {
            let m = u.store.get(id).unwrap();
            let sim: f64 = m.embedding().iter().zip(q).map(|(a, b)| a * b).sum();
            (sim.clamp(-1.0, 1.0), m.provenance().created_at().0, id.as_str().to_string(), m.tier())
        })
        .filter(|r| r.0 >= cfg.threshold)
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let pick = |tier: Tier, k: usize| rows.iter().filter(|r| r.3 == tier).take(k).map(|r| r.2.clone()).collect();
    (pick(Tier::Private, cfg.k_user), pick(Tier::Shared, cfg.k_cross))
}
