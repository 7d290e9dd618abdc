//! # equiseg-core
//!
//! A small rotation-equivariant deep-learning framework built around a
//! U-Net that jointly classifies deforestation drivers and predicts
//! deforestation segmentation maps.
//!
//! The crate is organized as:
//! - [`tensor`] — dense n-dimensional arrays with a minimal reverse-mode
//!   automatic-differentiation engine and exactly the operations the model
//!   needs (convolution, pooling, batch norm, losses, ...).
//! - [`group`] — finite rotation(-reflection) groups, their matrix
//!   representations, and the action of group elements on feature fields.
//! - [`kernels`] — orthonormal bases of the equivariant-kernel subspace and
//!   the expansion of learnable coefficients into convolution kernels.
//! - [`layers`] — equivariance-respecting layers over geometric tensors.
//! - [`model`] — the U-Net with a classification head, constructible as a
//!   plain CNN or as a cyclic-group-equivariant network from one config.
//! - [`data`] — synthetic scene generation, dataset loading, the driver
//!   label vocabulary, and rotated-test-set construction.
//! - [`metrics`] — classification / balanced segmentation accuracy and
//!   equivariance-error diagnostics.

pub mod data;
pub mod error;
pub mod group;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
