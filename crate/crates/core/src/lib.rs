//! Prototype soft-labels and mean-teacher test-time learning for few-shot
//! detection, on a synthetic detection world with a linear detector.

pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod postprocess;
pub mod prototypes;
pub mod ttl;
pub mod worldgen;

pub use error::{Error, Result};
