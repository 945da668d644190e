//! Two-tier top-k retrieval over admissible fragments.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::AccessTimeline;
use crate::ids::Tick;
use crate::memory::{FragmentId, MemoryFragment, MemoryStore, StoreError, Tier};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("vectors have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("similarity threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Dot product of two unit vectors, clamped to [-1, 1].
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64, RetrievalError> {
    if x.len() != y.len() {
        return Err(RetrievalError::DimensionMismatch { left: x.len(), right: y.len() });
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k_user: usize,
    pub k_cross: usize,
    pub threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k_user: 10, k_cross: 10, threshold: 0.1 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if (-1.0..=1.0).contains(&self.threshold) {
            Ok(())
        } else {
            Err(RetrievalError::InvalidThreshold(self.threshold))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFragment {
    pub id: FragmentId,
    pub similarity: f64,
    pub tier: Tier,
    pub created_at: Tick,
}

/// Similarity desc, then newest first, then id.
pub fn rank_order(a: &RankedFragment, b: &RankedFragment) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| b.created_at.cmp(&a.created_at))
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TieredView {
    /// The reader's own private fragments.
    pub user_tier: Vec<RankedFragment>,
    /// Shared fragments that pass the provenance constraint.
    pub cross_tier: Vec<RankedFragment>,
}

impl TieredView {
    pub fn len(&self) -> usize {
        self.user_tier.len() + self.cross_tier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// User tier first, then cross tier.
    pub fn iter(&self) -> impl Iterator<Item = &RankedFragment> {
        self.user_tier.iter().chain(&self.cross_tier)
    }
}

fn top_k(mut ranked: Vec<RankedFragment>, k: usize) -> Vec<RankedFragment> {
    ranked.sort_by(rank_order);
    ranked.truncate(k);
    ranked
}

/// Ranks admissible fragments for `(user, agent, t)` against `query`.
pub fn retrieve(
    store: &MemoryStore,
    timeline: &AccessTimeline,
    user: &str,
    agent: &str,
    t: Tick,
    query: &[f64],
    cfg: &RetrievalConfig,
) -> Result<TieredView, RetrievalError> {
    cfg.validate()?;
    if query.len() != store.dimension() {
        return Err(RetrievalError::DimensionMismatch {
            left: query.len(),
            right: store.dimension(),
        });
    }
    let mut user_tier = Vec::new();
    let mut cross_tier = Vec::new();
    for m in store.admissible_fragments(timeline, user, agent, t)? {
        let similarity = cosine(query, m.embedding())?;
        if similarity < cfg.threshold {
            continue;
        }
        let ranked = ranked(m, similarity);
        match m.tier() {
            // admissibility already restricts private fragments to their creator
            Tier::Private => user_tier.push(ranked),
            Tier::Shared => cross_tier.push(ranked),
        }
    }
    Ok(TieredView {
        user_tier: top_k(user_tier, cfg.k_user),
        cross_tier: top_k(cross_tier, cfg.k_cross),
    })
}

fn ranked(m: &MemoryFragment, similarity: f64) -> RankedFragment {
    RankedFragment {
        id: m.id().clone(),
        similarity,
        tier: m.tier(),
        created_at: m.provenance().created_at(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::Edge;
    use crate::embed::{DeterministicEmbedder, Embedder};
    use crate::ids::PrincipalId;
    use crate::memory::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(RetrievalError::DimensionMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn cosine_matches_naive_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let dim = rng.random_range(1..64);
            let mut x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for v in [&mut x, &mut y] {
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter_mut().for_each(|a| *a /= n);
            }
            // oracle: index loop accumulation
            let mut naive = 0.0;
            for i in 0..dim {
                naive += x[i] * y[i];
            }
            let got = cosine(&x, &y).unwrap();
            assert!((got - naive).abs() <= 1e-12);
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn invalid_threshold_rejected() {
        let cfg = RetrievalConfig { threshold: 1.5, ..Default::default() };
        assert_eq!(cfg.validate(), Err(RetrievalError::InvalidThreshold(1.5)));
    }

    #[test]
    fn cross_tier_keeps_the_k_best() {
        let emb = DeterministicEmbedder::new(64);
        let mut tl = AccessTimeline::new();
        for id in ["user:u1", "user:u2", "agent:a1", "resource:r1"] {
            tl.register(&id.parse::<PrincipalId>().unwrap());
        }
        tl.grant(Edge::user_agent("u1", "a1"), Tick(1)).unwrap();
        tl.grant(Edge::user_agent("u2", "a1"), Tick(2)).unwrap();
        tl.grant(Edge::agent_resource("a1", "r1"), Tick(3)).unwrap();
        let mut store = MemoryStore::new(64);
        let query = emb.embed("ceramic sintering temperature").unwrap();
        // 25 shared fragments whose embedding is a perturbation of the query,
        // so all pass the 0.1 threshold with distinct similarities.
        for i in 0..25u64 {
            let mut v = query.clone();
            v[(i as usize) % 64] += 0.05 * (i as f64 + 1.0);
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            let prov = Provenance::new(Tick(10 + i), "u2", ["a1"], ["r1"]).unwrap();
            let m = MemoryFragment::new(
                FragmentId::new(format!("f{i:02}")),
                Tier::Shared,
                "k",
                "v",
                v,
                prov,
            )
            .unwrap();
            store.insert(m, tl.principals()).unwrap();
        }
        let cfg = RetrievalConfig::default();
        let view = retrieve(&store, &tl, "u1", "a1", Tick(100), &query, &cfg).unwrap();
        assert!(view.user_tier.is_empty());
        assert_eq!(view.cross_tier.len(), 10);
        let mut sims: Vec<f64> = store
            .iter()
            .map(|m| cosine(&query, m.embedding()).unwrap())
            .collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f64> = view.cross_tier.iter().map(|r| r.similarity).collect();
        assert_eq!(got, sims[..10]);
    }

    #[test]
    fn no_admissible_fragments_gives_empty_tiers() {
        let mut tl = AccessTimeline::new();
        for id in ["user:u1", "agent:a1"] {
            tl.register(&id.parse::<PrincipalId>().unwrap());
        }
        let store = MemoryStore::new(8);
        let q = DeterministicEmbedder::new(8).embed("anything").unwrap();
        let view =
            retrieve(&store, &tl, "u1", "a1", Tick(0), &q, &RetrievalConfig::default()).unwrap();
        assert_eq!(view, TieredView::default());
    }

    #[test]
    fn ties_break_by_recency_then_id() {
        let r = |id: &str, s: f64, t: u64| RankedFragment {
            id: FragmentId::new(id),
            similarity: s,
            tier: Tier::Shared,
            created_at: Tick(t),
        };
        let mut v = [r("b", 0.5, 1), r("a", 0.5, 1), r("c", 0.5, 2), r("d", 0.9, 0)];
        v.sort_by(rank_order);
        let ids: Vec<&str> = v.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["d", "c", "a", "b"]);
    }
}
