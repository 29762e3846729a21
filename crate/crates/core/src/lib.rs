//! Stochastic loss-reserving models over run-off triangles and the
//! accident/development-period adjusted linear pool used to combine them.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration
//! and the command line live in the companion `adlp` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod distributions;
pub mod ensemble;
pub mod error;
pub mod glm;
pub mod linalg;
pub mod math;
pub mod scoring;
pub mod simulate;
pub mod smooth;
pub mod triangle;

pub use distributions::PredictiveDistribution;
pub use error::{Error, Result};
pub use triangle::{Cell, DataPartition, PartitionStrategy, Triangle, TriangleKind};
