//! Closed-loop test refinement: generate, execute, analyze and repair test
//! suites until coverage and failure-rate thresholds are met.

// `!(x > 0.0)` style checks are there to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod metrics;
pub mod memory;
pub mod model;
pub mod execution;
pub mod generation;
pub mod review;
pub mod orchestrator;
pub mod harness;
