//! Bayesian additive regression trees for one or several outcomes, with
//! treatment-effect models built on top.

pub mod bart;
pub mod causal;
pub mod error;
pub mod forest;
pub mod pipeline;
pub mod simbench;
pub mod stats;
pub mod trees;

pub use error::{Error, Result};
