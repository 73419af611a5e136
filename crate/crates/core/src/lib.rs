//! A desk-scale laboratory for contrastive sentence-embedding learning with
//! an optional visually grounded objective.
//!
//! A toy text encoder (embedding table + mean pooling + dropout) is trained
//! with the dropout-noise contrastive objective, optionally regularized by a
//! multimodal contrastive term that aligns sentences with their paired image
//! features in a shared space. Synthetic grounded corpora with known
//! semantics make the comparison measurable at laptop scale.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod suite;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
