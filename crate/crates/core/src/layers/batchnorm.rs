use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerGradients;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalization state. `gamma`/`beta` are learned; the
/// running statistics are buffers updated only by train-mode forwards.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    /// Weight of the old running value: `running ← m·running + (1−m)·batch`.
    pub stat_momentum: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, eps: f64, stat_momentum: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            eps,
            stat_momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
struct BnCache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub params: BatchNormParams<T>,
    cache: Option<BnCache<T>>,
}

/// Visits every element of channel `c` of an N×C×H×W buffer in row-major order.
fn channel_slices<T>(data: &[T], n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |s| &data[(s * c + ch) * hw..(s * c + ch + 1) * hw])
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(params: BatchNormParams<T>) -> Self {
        Self { params, cache: None }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.params.channels() {
            return Err(Error::Shape(format!(
                "batch norm has {} channels, input is {}",
                self.params.channels(),
                fmt_shape(x.shape())
            )));
        }
        Ok((n, c, h * w))
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, hw) = self.check_input(x)?;
        let p = &self.params;
        let mut out = x.clone();
        let data = out.data_mut();
        for ch in 0..c {
            let inv = T::from_f64(1.0 / (p.running_var.data()[ch].to_f64() + p.eps).sqrt());
            let scale = p.gamma.data()[ch] * inv;
            let mean = p.running_mean.data()[ch];
            let beta = p.beta.data()[ch];
            for s in 0..n {
                for v in &mut data[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *v = (*v - mean) * scale + beta;
                }
            }
        }
        Ok(out)
    }

    /// Train mode: normalizes with biased batch statistics, updates the
    /// running statistics and caches what backward needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, hw) = self.check_input(x)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::DegenerateVariance(format!("input {}", fmt_shape(x.shape()))));
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        let src = x.data();
        let p = &mut self.params;
        for ch in 0..c {
            let mut sum = 0.0;
            for row in channel_slices(src, n, c, hw, ch) {
                for &v in row {
                    sum += v.to_f64();
                }
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for row in channel_slices(src, n, c, hw, ch) {
                for &v in row {
                    let d = v.to_f64() - mean;
                    sq += d * d;
                }
            }
            let var = sq / m as f64;
            let inv = 1.0 / (var + p.eps).sqrt();
            inv_std[ch] = inv;

            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            let (gamma, beta) = (p.gamma.data()[ch], p.beta.data()[ch]);
            for s in 0..n {
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in range {
                    let xh = (src[i] - mean_t) * inv_t;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma * xh + beta;
                }
            }

            let mom = p.stat_momentum;
            let rm = &mut p.running_mean.data_mut()[ch];
            *rm = T::from_f64(mom * rm.to_f64() + (1.0 - mom) * mean);
            let rv = &mut p.running_var.data_mut()[ch];
            *rv = T::from_f64(mom * rv.to_f64() + (1.0 - mom) * var);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(out)
    }

    /// Chain rule through the batch statistics.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<LayerGradients<T>> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward called before forward".into()))?;
        if grad.shape() != xhat.shape() {
            return Err(Error::Shape(format!(
                "batch norm upstream gradient {} does not match input {}",
                fmt_shape(grad.shape()),
                fmt_shape(xhat.shape())
            )));
        }
        let (n, c, hw) = self.check_input(&xhat)?;
        let m = (n * hw) as f64;
        let g = grad.data();
        let xh = xhat.data();
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        let mut dx = vec![T::ZERO; grad.len()];
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for s in 0..n {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    sum_dy += g[i].to_f64();
                    sum_dy_xh += g[i].to_f64() * xh[i].to_f64();
                }
            }
            dgamma[ch] = T::from_f64(sum_dy_xh);
            dbeta[ch] = T::from_f64(sum_dy);
            let gamma = self.params.gamma.data()[ch].to_f64();
            let k = gamma * inv_std[ch] / m;
            for s in 0..n {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    let v = k * (m * g[i].to_f64() - sum_dy - xh[i].to_f64() * sum_dy_xh);
                    dx[i] = T::from_f64(v);
                }
            }
        }
        Ok(LayerGradients {
            input: Some(Tensor::new(grad.shape().to_vec(), dx)?),
            params: vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?],
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
