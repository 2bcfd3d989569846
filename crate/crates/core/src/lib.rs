//! Spatiotemporal convolution networks built from scratch.
//!
//! The crate covers the Inception-based video family (I3D, I2D, S3D,
//! S3D-G and the top-/bottom-heavy hybrids between them), the kernels they
//! need with reverse-mode gradients, analytic cost accounting, and a small
//! training harness with synthetic video datasets.

pub mod analysis;
pub mod arch;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use network::Network;
pub use tensor::{DType, Scalar, Tensor};
