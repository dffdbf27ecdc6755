//! Measures how faithfully a token-level generative model samples from a
//! prescribed discrete distribution.

pub mod backends;
pub mod dist;
pub mod extract;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod report;
