//! Adversarial domain adaptation over a holistic-local region graph.
//!
//! The crate trains a source-supervised classifier whose features are
//! propagated through two small graph networks (within-domain and
//! cross-domain) and aligned across domains by an adversarial
//! discriminator. A per-class distribution bank initializes the absent
//! domain's graph nodes. Everything is seeded and deterministic; a synthetic
//! two-domain benchmark plus persistence formats make runs reproducible
//! end to end.

pub mod bank;
pub mod digest;
pub mod error;
pub mod graph;
pub mod model;
pub mod probe;
pub mod synth;

pub use error::{AgraError, Result};
pub use graph::{Domain, Region, NODE_COUNT, REGION_COUNT};
