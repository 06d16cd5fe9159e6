//! From-scratch 1D convolutional network engine for single-channel EEG
//! seizure classification.
//!
//! The crate covers the whole experiment pipeline: dense tensors and
//! hand-written layer kernels, the 26-layer residual classifier and two
//! baselines, dataset ingestion and task relabeling, deterministic training,
//! evaluation metrics and a binary checkpoint format.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod persistence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
