//! Experiment plumbing: synthetic tasks, training, the invariant suite,
//! complexity benchmarks, attention export and parameter files.

pub mod bench;
pub mod export;
pub mod params;
pub mod suite;
pub mod task;
pub mod train;
