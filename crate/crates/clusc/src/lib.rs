//! Weight compression by grouped k-means codebooks.
//!
//! A weight matrix is cut into low-dimensional groups, the groups are
//! clustered, and the matrix is stored as a codebook of centroids plus
//! fixed 16-bit codes. Later stages shrink the remaining error: block-wise
//! calibration trains the codebooks against the dense block's outputs, and
//! recovery training finetunes them end-to-end on next-token prediction.
//! A symmetric round-to-nearest quantizer is included as the baseline.

pub mod block;
pub mod codec;
pub mod diag;
pub mod error;
pub mod gen;
pub mod kmeans;
pub mod lm;
pub mod manifest;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod rtn;
pub mod tape;

pub use error::Error;
pub use matrix::{GroupedView, Matrix};
