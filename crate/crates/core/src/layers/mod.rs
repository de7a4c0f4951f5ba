//! Hand-differentiated layers.
//!
//! Every layer has a read-only inference forward ([`Layer::forward`]), a
//! caching training forward ([`Layer::forward_train`]) and a backward that
//! consumes the cache and returns fresh gradients.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::Relu;
pub use batchnorm::{BatchNorm2d, BatchNormParams, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use conv::{Conv2d, ConvParams};
pub use dense::{Dense, DenseParams, Flatten};
pub use loss::{argmax_rows, softmax_cross_entropy, SoftmaxXent};
pub use pool::MaxPool2;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Whether batch norm uses batch statistics (and updates running ones) or the
/// running statistics only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output of a layer backward pass. `params` follows the order of
/// [`Layer::params`].
#[derive(Clone, Debug)]
pub struct LayerGradients<T: Scalar = f32> {
    pub input: Option<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

/// One layer of the network.
#[derive(Clone, Debug)]
pub enum Layer<T: Scalar = f32> {
    Conv(Conv2d<T>),
    MaxPool(MaxPool2),
    Relu(Relu),
    BatchNorm(BatchNorm2d<T>),
    Flatten(Flatten),
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::MaxPool(l) => Ok(l.forward(x)?.0),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::Relu(l) => Ok(l.forward_train(x)),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Flatten(l) => l.forward_train(x),
            Layer::Dense(l) => l.forward_train(x),
        }
    }

    /// Consumes the cached activations. `need_input` may be false for the
    /// lowest layer that still needs gradients.
    pub fn backward(&mut self, grad: &Tensor<T>, need_input: bool) -> Result<LayerGradients<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad, need_input),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
        }
    }

    /// Learnable parameters with their short names (`weight`, `bias`, `gamma`, `beta`).
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &l.params.weight), ("bias", &l.params.bias)],
            Layer::Dense(l) => vec![("weight", &l.params.weight), ("bias", &l.params.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &l.params.gamma), ("beta", &l.params.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &mut l.params.weight), ("bias", &mut l.params.bias)],
            Layer::Dense(l) => vec![("weight", &mut l.params.weight), ("bias", &mut l.params.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &mut l.params.gamma), ("beta", &mut l.params.beta)],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state saved in checkpoints (batch norm running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.params.running_mean),
                ("running_var", &l.params.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.params.running_mean),
                ("running_var", &mut l.params.running_var),
            ],
            _ => Vec::new(),
        }
    }

    /// Drops any cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::MaxPool(l) => l.clear_cache(),
            Layer::Relu(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Flatten(l) => l.clear_cache(),
            Layer::Dense(l) => l.clear_cache(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
        }
    }
}
