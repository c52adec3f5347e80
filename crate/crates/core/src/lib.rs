//! Core library for the malloc-bench suite: a small gated-attention
//! sequential recommender whose per-user attention state can be managed by
//! thirteen interchangeable KV-cache policies, plus the instrumented
//! compute/memory accounting and ranking metrics used to compare them.
//!
//! The crate is `no_std` + `alloc` so the compute kernels can be embedded
//! anywhere; file formats, CLI, and the benchmark harness live in the
//! companion `malloc-bench` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod resources;

pub use error::{Error, Result};
pub use numerics::{MacMeter, Matrix, Rng};
