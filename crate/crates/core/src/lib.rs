//! Bias localization for small transformer classifiers.
//!
//! The crate generates a synthetic labeled corpus with controllable class
//! and sensitive-group imbalance, trains toy encoder classifiers on
//! group-balanced and group-imbalanced subsets (plus distilled students),
//! and compares them layer by layer (attention divergence, SVCCA distance)
//! and head by head (single-head ablation with per-class equalized odds).

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod report;
pub mod training;

pub use error::{Error, Result};
