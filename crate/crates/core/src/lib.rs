//! Training-free agentic visual anomaly detection.
//!
//! A multimodal model inspects each image through a plan / reason / reflect
//! loop, grounded by semantic evidence reports built from caption embeddings
//! and optionally calibrated with a handful of normal reference images.

pub mod agent;
pub mod config;
pub mod error;
pub mod eval;
pub mod memory;
pub mod primitives;
pub mod prompts;
pub mod providers;
pub mod templates;
pub mod vision;

pub use error::{Error, Result};
