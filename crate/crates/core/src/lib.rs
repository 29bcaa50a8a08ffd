//! Training and deployment of 1-bit convolutional networks regularized by a
//! two-mode Gaussian-mixture prior on kernel weights and a Gaussian prior on
//! class features.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with hand-written forward ops and VJPs.
//! * [`binarize`]: sign quantization, straight-through gradients, bit packing
//!   and XNOR/popcount convolution.
//! * [`bayes`]: the kernel and feature losses with their analytic gradients.

pub mod bayes;
pub mod binarize;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
