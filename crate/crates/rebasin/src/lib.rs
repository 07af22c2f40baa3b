//! Lottery-ticket mask transfer across random initializations via
//! weight-space permutation alignment.
//!
//! The crate trains small feed-forward networks, derives sparse masks by
//! iterative magnitude pruning, aligns two independently trained models by
//! activation matching, permutes the mask into the new model's basin, and
//! measures sparse-training quality, loss barriers and ensemble diversity.

pub mod align;
pub mod data;
pub mod engine;
pub mod checkpoint;
pub mod lmc;
pub mod metrics;
pub mod pipeline;
pub mod plan;
pub mod prune;
pub mod results;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
