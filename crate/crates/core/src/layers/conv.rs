use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{col2im_into, gemm, im2col_into, transpose_into, Scalar, Tensor, Window};

use super::LayerGradients;

/// Square-kernel convolution parameters. `weight` is `outC×inC×kh×kw`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (out_c, _, _, _) = weight.dims4()?;
        if bias.shape() != [out_c] {
            return Err(Error::Shape(format!(
                "conv bias {} does not match {out_c} filters",
                fmt_shape(bias.shape())
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("conv stride must be positive".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn window(&self) -> Window {
        let s = self.weight.shape();
        Window::new(s[2], s[3], self.stride, self.pad)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::Shape(format!(
                "conv expects N×C×H×W input, got {}",
                fmt_shape(input)
            )));
        };
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c} (input {})",
                self.in_channels(),
                fmt_shape(input)
            )));
        }
        let (ho, wo) = self.window().output_size(h, w)?;
        Ok(vec![n, self.out_channels(), ho, wo])
    }
}

/// 2-D convolution computed as im2col + one matrix multiply per sample.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub params: ConvParams<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(params: ConvParams<T>) -> Self {
        Self { params, cache: None }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.params.output_shape(x.shape())?;
        let (n, c, h, w) = x.dims4()?;
        let (oc, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
        let win = self.params.window();
        let kdim = c * win.kh * win.kw;
        let hw = ho * wo;
        let mut cols = vec![T::ZERO; kdim * hw];
        let mut out = vec![T::ZERO; n * oc * hw];
        let in_plane = c * h * w;
        for s in 0..n {
            im2col_into(
                &x.data()[s * in_plane..(s + 1) * in_plane],
                c,
                h,
                w,
                win,
                ho,
                wo,
                &mut cols,
            );
            let dst = &mut out[s * oc * hw..(s + 1) * oc * hw];
            gemm(self.params.weight.data(), &cols, dst, oc, kdim, hw);
            for (o, row) in dst.chunks_mut(hw).enumerate() {
                let b = self.params.bias.data()[o];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        Tensor::new(out_shape, out)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Gradients are summed over the batch in sample order.
    pub fn backward(&mut self, grad: &Tensor<T>, need_input: bool) -> Result<LayerGradients<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let out_shape = self.params.output_shape(x.shape())?;
        if grad.shape() != out_shape.as_slice() {
            return Err(Error::Shape(format!(
                "conv upstream gradient {} does not match output {}",
                fmt_shape(grad.shape()),
                fmt_shape(&out_shape)
            )));
        }
        let (n, c, h, w) = x.dims4()?;
        let (oc, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
        let win = self.params.window();
        let kdim = c * win.kh * win.kw;
        let hw = ho * wo;
        let in_plane = c * h * w;

        let mut dw = vec![T::ZERO; oc * kdim];
        let mut db = vec![T::ZERO; oc];
        let mut dx = if need_input {
            vec![T::ZERO; n * in_plane]
        } else {
            Vec::new()
        };

        let mut wt = Vec::new();
        if need_input {
            wt = vec![T::ZERO; kdim * oc];
            transpose_into(self.params.weight.data(), oc, kdim, &mut wt);
        }
        let mut cols = vec![T::ZERO; kdim * hw];
        let mut cols_t = vec![T::ZERO; hw * kdim];
        let mut dw_s = vec![T::ZERO; oc * kdim];
        let mut dcols = if need_input {
            vec![T::ZERO; kdim * hw]
        } else {
            Vec::new()
        };

        for s in 0..n {
            let g = &grad.data()[s * oc * hw..(s + 1) * oc * hw];
            im2col_into(
                &x.data()[s * in_plane..(s + 1) * in_plane],
                c,
                h,
                w,
                win,
                ho,
                wo,
                &mut cols,
            );
            transpose_into(&cols, kdim, hw, &mut cols_t);
            gemm(g, &cols_t, &mut dw_s, oc, hw, kdim);
            for (acc, v) in dw.iter_mut().zip(&dw_s) {
                *acc += *v;
            }
            for (o, row) in g.chunks(hw).enumerate() {
                let mut sum = T::ZERO;
                for &v in row {
                    sum += v;
                }
                db[o] += sum;
            }
            if need_input {
                gemm(&wt, g, &mut dcols, kdim, oc, hw);
                col2im_into(&dcols, c, h, w, win, ho, wo, &mut dx[s * in_plane..(s + 1) * in_plane]);
            }
        }

        Ok(LayerGradients {
            input: if need_input {
                Some(Tensor::new(x.shape().to_vec(), dx)?)
            } else {
                None
            },
            params: vec![
                Tensor::new(self.params.weight.shape().to_vec(), dw)?,
                Tensor::new(vec![oc], db)?,
            ],
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col and gemm.
    fn direct_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Vec<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (oc, _, kh, kw) = p.weight.dims4().unwrap();
        let (ho, wo) = p.window().output_size(h, w).unwrap();
        let mut out = vec![0.0; n * oc * ho * wo];
        for s in 0..n {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = p.bias.data()[o];
                        for ch in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * p.stride + i) as isize - p.pad as isize;
                                    let ix = (ox * p.stride + j) as isize - p.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.get(&[s, ch, iy as usize, ix as usize]).unwrap()
                                        * p.weight.get(&[o, ch, i, j]).unwrap();
                                }
                            }
                        }
                        out[((s * oc + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_over_ones_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let p = ConvParams::new(Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = Conv2d::new(p).forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(Conv2d::new(p).forward(&x).unwrap(), x);
    }

    #[test]
    fn ccblock_first_conv_shape() {
        let p = ConvParams::<f32>::new(Tensor::zeros(&[512, 512, 3, 3]), Tensor::zeros(&[512]), 1, 0).unwrap();
        assert_eq!(p.output_shape(&[1, 512, 7, 7]).unwrap(), vec![1, 512, 5, 5]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = ConvParams::<f32>::new(Tensor::zeros(&[4, 3, 3, 3]), Tensor::zeros(&[4]), 1, 1).unwrap();
        let err = Conv2d::new(p).forward(&Tensor::zeros(&[1, 2, 5, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn matches_direct_convolution() {
        let mut seed = 11u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            (seed >> 40) as f64 / (1u64 << 24) as f64 - 0.5
        };
        for &(pad, stride) in &[(0, 1), (1, 1), (1, 2)] {
            let x = Tensor::from_fn(&[2, 3, 7, 7], |_| rnd());
            let p = ConvParams::new(
                Tensor::from_fn(&[4, 3, 3, 3], |_| rnd()),
                Tensor::from_fn(&[4], |_| rnd()),
                stride,
                pad,
            )
            .unwrap();
            let got = Conv2d::new(p.clone()).forward(&x).unwrap();
            let want = direct_conv(&x, &p);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let p = ConvParams::<f32>::new(Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let err = Conv2d::new(p)
            .backward(&Tensor::zeros(&[1, 1, 2, 2]), true)
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
