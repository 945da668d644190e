//! Text embedders.
//!
//! The deterministic embedder hashes character trigrams of the normalized
//! text into a fixed number of signed buckets and L2-normalizes the result,
//! so similarity depends only on surface text and identical strings embed
//! identically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::{self, RemoteError};

pub const DEFAULT_DIMENSION: usize = 256;
const NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("remote embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("remote embedding has zero norm")]
    ZeroVector,
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Deterministic {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        endpoint: String,
        dimension: usize,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Deterministic { dimension: DEFAULT_DIMENSION }
    }
}

impl EmbedderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EmbedderSpec::Deterministic { dimension } | EmbedderSpec::Remote { dimension, .. } => {
                *dimension
            }
        }
    }

    pub fn build(&self) -> Box<dyn Embedder> {
        match self {
            EmbedderSpec::Deterministic { dimension } => {
                Box::new(DeterministicEmbedder::new(*dimension))
            }
            EmbedderSpec::Remote { endpoint, dimension } => {
                Box::new(RemoteEmbedder { endpoint: endpoint.clone(), dimension: *dimension })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeterministicEmbedder {
    dimension: usize,
}

impl DeterministicEmbedder {
    /// Panics if `dimension` is zero.
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for DeterministicEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn normalize_text(text: &str) -> Vec<char> {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    words.join(" ").chars().collect()
}

impl Embedder for DeterministicEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let chars = normalize_text(text);
        if chars.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        let mut gram = String::new();
        let width = NGRAM.min(chars.len());
        for window in chars.windows(width) {
            gram.clear();
            gram.extend(window);
            let h = fnv1a(gram.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // all grams cancelled out; fall back to a single hashed bucket
            let h = fnv1a(chars.iter().collect::<String>().as_bytes());
            v[(h % self.dimension as u64) as usize] = 1.0;
            return Ok(v);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Embeddings from an HTTP endpoint, re-normalized on arrival.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    dimension: usize,
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = remote::fetch_embedding(&self.endpoint, text)?;
        if v.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch { expected: self.dimension, got: v.len() });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}
