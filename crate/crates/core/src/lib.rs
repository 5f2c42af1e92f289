//! Cross-geographic lexical bias auditing for black-box toxicity scorers.
//!
//! The pipeline finds country-salient terms overrepresented in text a scorer
//! flags as toxic ([`saliency`]), probes each term's effect on the scorer by
//! template perturbation and clusters the responses ([`perturbation`]),
//! measures per-term subgroup bias ([`subgroup_metrics`]) and produces mitigation
//! datasets ([`mitigation`]).

pub mod corpus;
pub mod error;
pub mod hashing;
pub mod mitigation;
pub mod perturbation;
pub mod pipeline;
pub mod saliency;
pub mod scorer;
pub mod subgroup_metrics;
pub mod synth;

pub use error::{Error, Result, ScoreError};
