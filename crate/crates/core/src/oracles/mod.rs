//! Independent reference implementations used by the test suites.
//!
//! Nothing here is used by the library itself; it is compiled for unit
//! tests and when the `oracles` feature is enabled.

pub mod gradcheck;
pub mod adapter;
pub mod metrics;
pub mod retrieval;
