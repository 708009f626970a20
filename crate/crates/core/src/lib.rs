//! Exact desk-scale testbed for task sampling in offline zero-shot
//! reinforcement learning on tabular MDPs.
//!
//! The crate covers the full pipeline: offline dataset generation,
//! state-feature construction, task-vector extraction from subtrajectories,
//! a Gaussian-mixture behavioral task distribution, successor-feature policy
//! libraries with generalized policy improvement, zero-shot reward
//! inference, and diagnostics of return-variance dilution under uniform
//! task sampling.

pub mod analysis;
pub mod dataset;
pub mod engine;
pub mod envs;
pub mod error;
pub mod features;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
