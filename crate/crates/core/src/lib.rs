//! Elastic distributed training with one long-lived task per node.
//!
//! Training data is split into fixed-capacity, stateful [`data::DataChunk`]s.
//! Workers never come and go mid-iteration; instead the scheduler moves chunks
//! between iterations to scale in, scale out and balance load across
//! heterogeneous nodes. Solvers are CoCoA (dual coordinate ascent, hinge loss)
//! and local SGD (logistic loss). A virtual cluster projects iteration times
//! and emulates the micro-task execution model for comparison.

pub mod cluster;
pub mod data;
pub mod error;
pub mod ingest;
pub mod policies;
pub mod scalar;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Exact, Real};

/// Exact rational used for schedule projections.
pub type Rational = num_rational::Ratio<i64>;

pub type Sample64 = data::Sample<f64>;
pub type Chunk64 = data::DataChunk<f64>;
pub type Model64 = data::Model<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Model32 = data::Model<f32>;
