use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{gemm, transpose_into, Scalar, Tensor};

use super::LayerGradients;

/// Fully connected layer, `weight` is `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::Shape(format!(
                "dense bias {} does not match {out} outputs",
                fmt_shape(bias.shape())
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T: Scalar = f32> {
    pub params: DenseParams<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(params: DenseParams<T>) -> Self {
        Self { params, cache: None }
    }

    /// `out = x · Wᵀ + b`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, inp) = x.dims2()?;
        if inp != self.params.in_features() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.params.in_features(),
                fmt_shape(x.shape())
            )));
        }
        let out_f = self.params.out_features();
        let mut wt = vec![T::ZERO; inp * out_f];
        transpose_into(self.params.weight.data(), out_f, inp, &mut wt);
        let mut out = vec![T::ZERO; n * out_f];
        gemm(x.data(), &wt, &mut out, n, inp, out_f);
        for row in out.chunks_mut(out_f) {
            for (v, &b) in row.iter_mut().zip(self.params.bias.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![n, out_f], out)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<LayerGradients<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let (n, inp) = x.dims2()?;
        let out_f = self.params.out_features();
        if grad.shape() != [n, out_f] {
            return Err(Error::Shape(format!(
                "dense upstream gradient {} does not match output {n}x{out_f}",
                fmt_shape(grad.shape())
            )));
        }
        let mut dx = vec![T::ZERO; n * inp];
        gemm(grad.data(), self.params.weight.data(), &mut dx, n, out_f, inp);

        let mut gt = vec![T::ZERO; out_f * n];
        transpose_into(grad.data(), n, out_f, &mut gt);
        let mut dw = vec![T::ZERO; out_f * inp];
        gemm(&gt, x.data(), &mut dw, out_f, n, inp);

        let mut db = vec![T::ZERO; out_f];
        for row in grad.data().chunks(out_f) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Ok(LayerGradients {
            input: Some(Tensor::new(vec![n, inp], dx)?),
            params: vec![Tensor::new(vec![out_f, inp], dw)?, Tensor::new(vec![out_f], db)?],
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// `N×C×H×W → N×(C·H·W)`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("cannot flatten a scalar".into()))?;
        let rest = x.len() / n;
        x.clone().reshape(&[n, rest])
    }

    pub fn forward_train<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.cache = Some(x.shape().to_vec());
        self.forward(x)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<LayerGradients<T>> {
        let shape = self
            .cache
            .take()
            .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
        Ok(LayerGradients {
            input: Some(grad.clone().reshape(&shape)?),
            params: Vec::new(),
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
