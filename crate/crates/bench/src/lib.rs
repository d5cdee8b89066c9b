//! Benchmark harness and command-line front end for the dual-network tracker.

pub mod dataset;
pub mod maps;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod results;
pub mod runner;
pub mod selftest;
