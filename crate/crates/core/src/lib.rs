//! Verbalized-confidence tooling for question-answering models.
//!
//! The pipeline samples a model several times per question, turns answer
//! agreement into a consistency score, maps consistency to empirical accuracy,
//! and emits fine-tuning data that teaches the model to state calibrated
//! confidence (single-question task) and to rank questions by confidence
//! (pairwise task). The same crate scores verbalized confidence with ECE and
//! AUC-style discrimination metrics and tests before/after differences with a
//! paired bootstrap.

pub mod consistency;
pub mod corpus;
pub mod exec;
pub mod gateway;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod targets;

pub use exec::Execution;
