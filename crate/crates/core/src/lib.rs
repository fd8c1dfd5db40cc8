//! Federated averaging simulator with a from-scratch neural network core and
//! pluggable activation normalization layers.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the harness and experiments use.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fed;
pub mod model;
pub mod nn;
pub mod norm;
pub mod partition;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelState, Topology};
pub use norm::{Mode, NormKind, NormState};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type NormState64 = NormState<f64>;
pub type ModelState64 = ModelState<f64>;
