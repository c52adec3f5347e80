//! Dense row-major matrices, an instrumented multiply-accumulate meter, and
//! a deterministic cross-platform random number generator. Everything else
//! in the crate builds on these three primitives.

mod matrix;
mod meter;
mod rng;

pub use matrix::{dot, softmax_in_place, Matrix};
pub use meter::MacMeter;
pub use rng::Rng;
