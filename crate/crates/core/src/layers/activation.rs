use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerGradients;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::ZERO { v } else { T::ZERO })
    }

    pub fn forward_train<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = Some(x.data().iter().map(|&v| v > T::ZERO).collect());
        self.forward(x)
    }

    /// Passes gradient only where the input was strictly positive.
    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<LayerGradients<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::State("relu backward called before forward".into()))?;
        if mask.len() != grad.len() {
            return Err(Error::Shape(format!(
                "relu upstream gradient {} does not match cached input",
                fmt_shape(grad.shape())
            )));
        }
        let data = grad
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { T::ZERO })
            .collect();
        Ok(LayerGradients {
            input: Some(Tensor::new(grad.shape().to_vec(), data)?),
            params: Vec::new(),
        })
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}
