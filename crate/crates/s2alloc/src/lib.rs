//! Standard-library side of `s2alloc`: environment configuration, detection
//! policy, the Monte Carlo simulator, the analytic/empirical comparison
//! report, the malloc/free benchmark, the self-test and the command line.
//!
//! The allocator and the closed-form model live in [`s2alloc_core`].

pub mod bench;
pub mod cli;
pub mod env;
pub mod policy;
pub mod report;
pub mod selftest;
pub mod simulator;

pub use s2alloc_core as core;
