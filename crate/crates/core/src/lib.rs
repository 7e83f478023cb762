//! Individual-level behavioral anomaly detection for human mobility data.
//!
//! Trips are segmented from staypoints, embedded with spatial-semantic and
//! temporal features, clustered by a recurrent variational model trained on
//! a past period, summarized into per-individual behavior profiles, and
//! compared across periods with a weighted six-part change score.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod profile;
pub mod scoring;
pub mod spatial;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
pub use exec::Execution;
