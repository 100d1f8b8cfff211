//! Contracts for costly information acquisition.
//!
//! An agent chooses an experiment `p(d|θ)` at a posterior-separable cost and
//! is paid `b(d,θ)`; the principal designs `b` subject to limited liability
//! on both sides. The crate computes agent best responses (optionally under a
//! capacity constraint), first-best and second-best Pareto-optimal contracts,
//! and the decomposition `b = αy − β − γ`.

pub mod agent;
pub mod contract;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod reproduce;

pub use error::{Error, Result};
