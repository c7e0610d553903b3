//! Hybrid online/in-store behavior modeling.
//!
//! Streaming online events and batched in-store transactions are joined into
//! per-user hybrid sequences by a windowed feature pipeline, then fed to a
//! causal transformer recommender whose in-store positions are produced by a
//! permutation-invariant set encoder.

pub mod domain;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
