//! Learned function inlining over a synthetic program model.
//!
//! The crate covers the whole pipeline: program generation and analyses
//! ([`progmodel`]), static features ([`features`]), a deterministic cost
//! oracle standing in for execution ([`perf_oracle`]), autotuned data
//! collection and preprocessing ([`dataset`]), the speedup regressor
//! ([`ir2perf`]) and the reinforcement-learned inlining policy ([`policy`]).

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod features;
pub mod ir2perf;
pub mod linalg;
pub mod nn;
pub mod perf_oracle;
pub mod policy;
pub mod progmodel;
pub mod util;

pub use error::{Error, Result};
