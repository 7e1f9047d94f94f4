//! Two-stage cascaded region proposals with constrained sampling, test-time
//! merging and a synthetic evaluation harness.

pub mod boxes;
pub mod cascade;
pub mod eval;
pub mod harness;
pub mod objectness;
pub mod postprocess;
pub mod rng;
pub mod sampling;
pub mod simgen;
