use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerGradients;

/// Non-overlapping 2×2 max pooling. Ties go to the first element in
/// row-major scan order of the window.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::Shape(format!(
                "maxpool expects N×C×H×W input, got {}",
                fmt_shape(input)
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool needs even spatial dims, got {}",
                fmt_shape(input)
            )));
        }
        Ok(vec![n, c, h / 2, w / 2])
    }

    /// Pooled tensor plus, per output element, the flat input offset of its max.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let out_shape = Self::output_shape(x.shape())?;
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let first = base + 2 * oy * w + 2 * ox;
                    let mut best = first;
                    for off in [first + 1, first + w, first + w + 1] {
                        if src[off] > src[best] {
                            best = off;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::new(out_shape, out)?, arg))
    }

    pub fn forward_train<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = self.forward(x)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(y)
    }

    /// Routes each upstream value to the recorded argmax.
    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<LayerGradients<T>> {
        let (arg, in_shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("maxpool backward called before forward".into()))?;
        if grad.len() != arg.len() {
            return Err(Error::Shape(format!(
                "maxpool upstream gradient {} does not match pooled output",
                fmt_shape(grad.shape())
            )));
        }
        let mut dx = Tensor::zeros(&in_shape);
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(grad.data()) {
            d[i] += g;
        }
        Ok(LayerGradients {
            input: Some(dx),
            params: Vec::new(),
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
