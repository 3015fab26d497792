//! File formats, the live pipelined executor and the `stalepipe` command
//! line, built on `stalepipe-core`.

pub mod commands;
pub mod config;
pub mod exec;
pub mod formats;
pub mod profiling;
pub mod workload;
