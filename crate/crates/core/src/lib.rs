//! Faithful rationale extraction for text classification.
//!
//! A support model is trained on full text and used only to score tokens;
//! the scores are discretized into rationales (directly, or through a
//! trained tagger); a fresh classifier is then trained and evaluated on the
//! rationales alone, so its predictions depend on nothing but the extracted
//! text. An end-to-end REINFORCE rationalizer is included as the baseline.

pub mod checkpoint;
pub mod corpus;
pub mod discretize;
pub mod error;
pub mod extractor;
pub mod harness;
pub mod lei;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod saliency;

pub use error::{Error, Result};
