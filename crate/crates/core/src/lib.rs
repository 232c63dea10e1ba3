//! Dual-branch land cover classifier for satellite image time series.
//!
//! A convolutional branch reads the whole series as one stacked image; a
//! recurrent branch runs a shallow CNN per acquisition date, a GRU over the
//! resulting sequence, and attention pooling over the hidden states. The two
//! feature vectors are concatenated for the final classifier, and each one
//! also feeds an auxiliary classifier during training.
//!
//! Everything, including the differentiation engine, lives in this crate:
//!
//! - [`tensor`]: dense tensors, the operation tape, finite-difference checks
//! - [`nn`]: convolution, batch normalization, dropout, dense layers, loss
//! - [`recurrent`]: GRU cell and attention pooling
//! - [`model`]: the full network, its loss and checkpoint format
//! - [`sits`]: time-series cubes, preprocessing, patches, splits, synthetic data
//! - [`train`]: Adam, the training loop, metrics, ablation

pub mod error;
pub mod nn;
pub mod params;
pub mod model;
pub mod recurrent;
pub mod rng;
pub mod sits;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::{Real, Tape, Tensor, Var};
