//! Patch-embedded transformer encoder-decoder for long-horizon time-series
//! forecasting, built on a small reverse-mode autodiff engine.
//!
//! Every channel of a multivariate series is forecast independently with
//! shared weights: the series is cut into overlapping patches, embedded,
//! passed through a post-norm transformer encoder, decoded from a
//! half-lookback-plus-zeros input, and projected to the horizon by a linear
//! head.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Fault, Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ParameterStore, Tensor};
