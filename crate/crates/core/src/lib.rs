//! Incremental knowledge tracing across schools.
//!
//! A self-attentive knowledge-tracing model is trained task by task, one
//! school at a time, handing only a checkpoint (weights plus problem registry)
//! from one task to the next. The crate also provides the joint and disjoint
//! baselines, ranking metrics, and a t-SNE drift analysis of the schools'
//! problem vocabularies.

pub mod continual;
pub mod drift;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod numcore;
pub mod sakt;
pub mod seqgen;
pub mod train;

pub use error::{Error, Result};
