//! Style-randomized domain generalization for multi-label image
//! classification.
//!
//! The crate is generic over the floating-point [`Scalar`]; the `*F32` and
//! `*F64` aliases pin the common precisions.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod srm_fl;
pub mod style;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Scalar, EPSILON};
pub use tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type GraphF32 = Graph<f32>;
pub type GraphF64 = Graph<f64>;
