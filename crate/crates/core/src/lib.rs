//! Adaptive low-light image enhancement.
//!
//! An illumination classifier decides whether an image needs scene-wide
//! (global) or spatially selective (local) illumination correction; a
//! single-channel estimator corrects the HSV value plane on the chosen route,
//! a multi-channel estimator refines color, and the two are blended.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the reference `f64` precision.

pub mod cli;
pub mod colorspace;
pub mod error;
pub mod estimators;
pub mod gli;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod persistence;
pub mod pipeline;
pub mod route;
pub mod scalar;
pub mod slcformer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
