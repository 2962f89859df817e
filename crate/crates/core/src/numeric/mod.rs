//! Deterministic dense matrices and a portable PCG32 generator.
//!
//! Everything above this module relies on two properties: matrix products sum
//! over the inner dimension in ascending order, and the generator produces the
//! same stream on every platform for a given seed.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::Pcg32;
