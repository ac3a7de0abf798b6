//! Kernel mean shrinkage (KMS) MMD losses for learning group-invariant
//! representations, a small adversarially trained classifier that uses them,
//! and fairness diagnostics for the result.

pub mod analytics;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod shrinkage;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
