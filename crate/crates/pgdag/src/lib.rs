//! File formats, run configuration and the command implementations behind
//! the `pgdag` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod fixture;
pub mod graph_file;
pub mod metrics;
pub mod parallel;
