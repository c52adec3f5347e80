//! Benchmark harness for cache-policy evaluation: dataset IO, the
//! checkpoint format, scenario execution over a worker pool, Pareto
//! extraction, and report emission.

pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod harness;
pub mod pareto;
pub mod report;
