//! Continual learning for token-level sequence labeling.
//!
//! This crate trains a small window-encoder tagger over sequences of
//! NER-style tasks and applies elastic weight consolidation to limit
//! catastrophic forgetting: after each task the diagonal Fisher
//! information is estimated at the task's optimum, and later tasks are
//! trained under a quadratic penalty anchoring important parameters.
//! Two regimes are supported: full-model consolidation when tasks share a
//! label set (distribution shift), and shared-parameter consolidation with
//! swappable output heads when label sets differ (distinct tasks).
//!
//! Modules:
//! - [`autodiff`]: tensors, parameter store, reverse-mode tape.
//! - [`tagger`]: the embedding + context-window + head classifier.
//! - [`ewc`]: Fisher estimation, penalty, consolidated loss.
//! - [`corpus`]: CoNLL parsing, vocabulary, label schemes, encoding.
//! - [`synth`]: procedural task-pair generators for desk-scale benchmarks.
//! - [`training`]: per-task SGD loop and multi-task sequence orchestration.
//! - [`eval`]: token-level F1 reports and retention summaries.
//! - [`rng`]: documented deterministic randomness.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod ewc;
pub mod gradcheck;
pub mod rng;
pub mod synth;
pub mod tagger;
pub mod training;

pub use error::{CoreError, Result};
