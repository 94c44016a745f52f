//! U-shaped hierarchical segmentation transformer with a multi-scale
//! context bridge.
//!
//! The crate is built bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, finite-difference checks
//! * [`nn`]: patch embedding/merging/expanding, efficient self-attention,
//!   the mix feed-forward network and the transformer block
//! * [`model`]: encoder, context bridge, decoder, initialization, checkpoints
//! * [`metrics`], [`data`], [`train`]: evaluation, datasets and the training loop
//!
//! Numerics are generic over [`Scalar`]; the aliases below fix the two
//! precisions used in practice (64-bit for verification, 32-bit for training).

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::Module;
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = model::SegModel<f32>;
pub type Model64 = model::SegModel<f64>;
