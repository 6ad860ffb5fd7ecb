//! Token-level confidence (TLC) for caption correctness.
//!
//! The crate scores generated token sequences with per-token confidence —
//! algebraic measures over the output logits (TLC-A) or a small learned
//! bidirectional estimator (TLC-L) — calibrates a decision threshold to a
//! target precision, re-ranks beam-search candidates to cut hallucinated
//! objects, and evaluates hallucination / diversity / pairwise-matching
//! metrics. A built-in synthetic scene-captioning sandbox makes the whole
//! pipeline runnable end to end at desk scale.
//!
//! Numeric kernels are generic over the scalar type through [`Float`];
//! the pipeline and the serialized artifacts use [`Real`] (`f64`).

pub mod calibration;
pub mod captioner;
pub mod confidence;
pub mod domain;
pub mod error;
pub mod estimator;
pub mod evaluation;
mod float;
pub mod linalg;
pub mod pipeline;
pub mod rerank;
mod stream;

pub use error::CoreError;
pub use float::Float;

/// Scalar type used by the pipeline and all serialized artifacts.
pub type Real = f64;

/// Per-step logit vector at pipeline precision.
pub type Distribution = domain::TokenDistribution<Real>;
/// Beam-search candidate at pipeline precision.
pub type Beam = domain::CandidateBeam<Real>;

/// Version tag carried by every serialized record and artifact.
pub const SCHEMA_VERSION: &str = "tlc/1";
