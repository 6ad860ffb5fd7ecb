//! Shared vocabulary of data types used by every other module: tokens,
//! scenes, captions, per-step logit distributions, beam candidates, and
//! concept spans, plus their validation rules.

mod beam;
mod caption;
pub mod jsonl;
mod scene;
mod span;
mod vocab;

pub use beam::{validate_beam, BeamViolation, CandidateBeam, TokenDistribution, LOG_LIKELIHOOD_TOL};
pub use caption::{Caption, ReferenceSet};
pub use scene::{Scene, SceneInstance};
pub use span::{extract_concept_spans, ConceptSpan};
pub use vocab::Vocabulary;
