//! Core algorithms for staleness-aware training of memory-based temporal GNNs.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation:
//!
//! - [`graph`]: event streams, chronological splits, batching, negative
//!   sampling and most-recent temporal neighbor sampling.
//! - [`memory`]: the versioned node-memory store with delayed writes, the
//!   stale-node statistics used to cap the staleness bound, and the
//!   similarity-based staleness mitigation.
//! - [`model`]: a small memory-based TGNN (message, GRU memory updater,
//!   neighbor-mean embedding, link decoder) with hand-written gradients.
//! - [`trainer`]: the five training stages, usable both straight-line and
//!   from a pipelined executor.
//! - [`pipeline`]: the analytic stage-timing recurrence, the minimal
//!   staleness solver and the throughput / memory-overhead estimates.
//! - [`sim`]: a discrete-event simulator of the pipeline and trace analysis.
//!
//! IO, threads and the command line live in the `stalepipe` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fixtures;
pub mod graph;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod synth;
pub mod trainer;

mod math;

pub use graph::{Event, EventStream, GraphError, NodeId};
pub use memory::{MemoryStore, StoreError};
pub use pipeline::{Stage, StageProfile, StalenessPlan, Timeline};
pub use sim::Trace;
