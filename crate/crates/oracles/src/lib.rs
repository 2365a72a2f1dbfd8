//! Slow, independent reference implementations the test suites compare against.
//!
//! Nothing here shares code with the `voxmat` crate.

pub mod calculus;
pub mod geometry;
pub mod stats;
