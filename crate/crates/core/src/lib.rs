//! Grounded situation recognition toolkit.
//!
//! A situation is a verb plus a frame of role/noun assignments; a grounded
//! situation additionally localizes each role with an optional bounding box.
//! This crate holds the data model, file loading, the five-metric evaluation
//! suite, detection geometry, late-fusion grounding, loss kernels with
//! analytic gradients, grounded-semantic retrieval and situation chaining.

pub mod chaining;
pub mod dataset;
pub mod embedding;
mod error;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod retrieval;
pub mod swig_release;

pub use error::{Error, Result};
pub use frame::{
    AnnotatedImage, BoundingBox, GroundedFrame, NounVocabulary, PredictionRecord, RoleSlot,
    ValidationReport, VerbEntry, VerbLexicon, Violation,
};

/// Version of the JSON file schemas read and written by this crate.
pub const SCHEMA_VERSION: u32 = 1;
