//! VGG-16 backbone with a CCBlock head for chest X-ray classification
//! (covid / pneumonia / normal), written on a small hand-rolled tensor
//! library: im2col convolution, batch norm, SGD with momentum, the CCW
//! weight format, and evaluation metrics.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use model::{build_model, Model, ModelSpec};
pub use tensor::{Scalar, Tensor};
