//! Dataset distillation by attention matching.
//!
//! A small synthetic image set is optimized so that the spatial and channel
//! attention statistics it induces in randomly initialized ConvNets match those
//! of the real training set, with a mean-embedding (MMD) term on the
//! penultimate features. The crate also ships the downstream evaluation
//! protocol, a NAS proxy-ranking harness and finite-difference gradient checks.
//!
//! See the runnable programs under `examples/` for one entry point per capability.

pub mod attention;
pub mod augment;
pub(crate) mod binio;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod nas;
pub mod real;
pub mod rng;

pub use error::{Error, Result};
pub use real::{DType, Real};
