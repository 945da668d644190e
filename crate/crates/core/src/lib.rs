//! Permission-aware shared memory for multi-user, multi-agent systems.
//!
//! Users reach agents and agents reach resources through time-varying
//! bipartite graphs. Every memory fragment carries the provenance of its
//! creation, and a reader only ever sees fragments whose provenance is
//! covered by its current permissions.

pub mod access;
pub mod audit;
pub mod embed;
pub mod ids;
pub mod memory;
pub mod metrics;
pub mod orchestration;
pub mod policy;
pub mod presets;
pub mod prompts;
pub mod remote;
pub mod retrieval;
pub mod scenario;
pub mod schedule;
pub mod substrate;
pub mod verify;

pub use access::{AccessError, AccessTimeline, Action, Edge, PermissionEvent, Principals};
pub use audit::{Actor, AuditAction, AuditLog, AuditRecord, Subject};
pub use embed::{DeterministicEmbedder, Embedder, EmbedderSpec};
pub use ids::{PrincipalId, PrincipalKind, Tick};
pub use memory::{FragmentId, MemoryFragment, MemoryStore, Provenance, Tier};
pub use policy::{InteractionTrace, MemoryMode, PolicySet};
pub use retrieval::{retrieve, RetrievalConfig, TieredView};
pub use substrate::{Substrate, SubstrateError};
