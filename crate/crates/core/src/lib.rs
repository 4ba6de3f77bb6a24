//! Asynchronous federated optimization with differential privacy.
//!
//! The crate provides, in layers:
//! - `dp`: bounded-sensitivity noise, clipping, and budget accounting
//! - `models`: the objective zoo (logistic, multiclass hinge, synthetic quadratic)
//! - `schedules`: learning-rate rules and the multi-stage controller
//! - `engine`: the deterministic edge-cloud simulator
//! - `net`: the same protocol over TCP for real distributed runs
//! - `idx`: IDX image/label file parsing
//! - `experiment`: grid runner, convergence detection, gradient inversion probe

pub mod dp;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod idx;
pub mod models;
pub mod net;
pub mod schedules;
pub mod vecmath;

pub use error::{AfdpError, Result};
