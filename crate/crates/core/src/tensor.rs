//! Dense row-major tensors and the two kernels every layer is built on:
//! matrix multiply and im2col/col2im.
//!
//! Summation order is fixed: every output element of [`matmul`] is accumulated
//! as `((a0*b0 + a1*b1) + a2*b2) + ...` in increasing inner index, exactly like
//! the naive triple loop, whatever the blocking or thread count. That makes
//! runs bit-reproducible on one machine.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rayon::prelude::*;

use crate::error::{fmt_shape, Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (storage and training)
/// and `f64` (gradient checking runs the same layer code in double precision).
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense N-dimensional array, row-major (last index fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}]", fmt_shape(&self.shape))?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dimension {pos} of {} is zero", fmt_shape(shape))));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {} needs {n} values, got {}",
                fmt_shape(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major offset of a coordinate.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "index of rank {} into tensor {}",
                index.len(),
                fmt_shape(&self.shape)
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Shape(format!(
                    "index {index:?} out of bounds for {}",
                    fmt_shape(&self.shape)
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.shape),
                fmt_shape(shape)
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {} to {}",
                fmt_shape(&other.shape),
                fmt_shape(&self.shape)
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot of {} and {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum())
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::ZERO; r * c];
        transpose_into(&self.data, r, c, &mut out);
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!(
                "expected a 2-D tensor, got {}",
                fmt_shape(&self.shape)
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::Shape(format!(
                "expected a 3-D tensor, got {}",
                fmt_shape(&self.shape)
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!(
                "expected a 4-D tensor, got {}",
                fmt_shape(&self.shape)
            ))),
        }
    }

    /// Sub-tensor `i` along the leading axis, copied out.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::Shape("cannot index a scalar".into()))?;
        if i >= lead {
            return Err(Error::Shape(format!(
                "index {i} out of bounds for leading axis of {}",
                fmt_shape(&self.shape)
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack {} with {}",
                    fmt_shape(&t.shape),
                    fmt_shape(&first.shape)
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

pub(crate) fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {} · {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;
const NC: usize = 256;
const MC: usize = 64;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
///
/// Blocked over rows, columns and the inner dimension. Inner-dimension blocks
/// reload the running sum from `out`, so each element still sees one
/// sequential accumulation over `t = 0..k`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(T::ZERO);
        return;
    }
    let body = |(blk, out_rows): (usize, &mut [T])| {
        let i_base = blk * MC;
        let rows = out_rows.len() / n;
        let a_rows = &a[i_base * k..(i_base + rows) * k];
        gemm_block(a_rows, b, out_rows, rows, k, n);
    };
    if m * n * k >= 1 << 20 {
        out.par_chunks_mut(MC * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(MC * n).enumerate().for_each(body);
    }
}

fn gemm_block<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(NC) {
        let j1 = (j0 + NC).min(n);
        for t0 in (0..k).step_by(KC) {
            let t1 = (t0 + KC).min(k);
            let first = t0 == 0;
            let mut i = 0;
            while i + MR <= m {
                panel::<T, MR>(a, b, out, i, j0, j1, t0, t1, k, n, first);
                i += MR;
            }
            match m - i {
                3 => panel::<T, 3>(a, b, out, i, j0, j1, t0, t1, k, n, first),
                2 => panel::<T, 2>(a, b, out, i, j0, j1, t0, t1, k, n, first),
                1 => panel::<T, 1>(a, b, out, i, j0, j1, t0, t1, k, n, first),
                _ => {}
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn panel<T: Scalar, const R: usize>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    i: usize,
    j0: usize,
    j1: usize,
    t0: usize,
    t1: usize,
    k: usize,
    n: usize,
    first: bool,
) {
    let mut j = j0;
    while j + NR <= j1 {
        let mut acc = [[T::ZERO; NR]; R];
        if !first {
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
        }
        for t in t0..t1 {
            let bv: &[T; NR] = b[t * n + j..t * n + j + NR].try_into().unwrap();
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + t];
                for c in 0..NR {
                    row[c] += av * bv[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
        }
        j += NR;
    }
    // Column remainder, same accumulation order.
    for r in 0..R {
        for jj in j..j1 {
            let mut s = if first { T::ZERO } else { out[(i + r) * n + jj] };
            for t in t0..t1 {
                s += a[(i + r) * k + t] * b[t * n + jj];
            }
            out[(i + r) * n + jj] = s;
        }
    }
}

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self { kh, kw, stride, pad }
    }

    /// Output spatial size for an `h×w` input; errors when the window does not
    /// tile the padded input exactly.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if self.stride == 0 || k == 0 || padded < k || (padded - k) % self.stride != 0 {
                return Err(Error::Shape(format!(
                    "window {}x{} stride {} pad {} does not tile input {h}x{w}",
                    self.kh, self.kw, self.stride, self.pad
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((dim(h, self.kh)?, dim(w, self.kw)?))
    }
}

/// Patch matrix of a `C×H×W` image: row `(c, ki, kj)` (channel-major, then
/// row-major within the patch), column = output position. Padded taps are 0.
pub fn im2col<T: Scalar>(input: &Tensor<T>, win: Window) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (ho, wo) = win.output_size(h, w)?;
    let mut out = vec![T::ZERO; c * win.kh * win.kw * ho * wo];
    im2col_into(input.data(), c, h, w, win, ho, wo, &mut out);
    Tensor::new(vec![c * win.kh * win.kw, ho * wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let cols = ho * wo;
    let pad = win.pad as isize;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ch * win.kh + ki) * win.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps and
/// dropping padded taps.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, c: usize, h: usize, w: usize, win: Window) -> Result<Tensor<T>> {
    let (ho, wo) = win.output_size(h, w)?;
    let expected = [c * win.kh * win.kw, ho * wo];
    if cols.shape() != expected {
        return Err(Error::Shape(format!(
            "col2im expects {} columns matrix for {c}x{h}x{w}, got {}",
            fmt_shape(&expected),
            fmt_shape(cols.shape())
        )));
    }
    let mut out = vec![T::ZERO; c * h * w];
    col2im_into(cols.data(), c, h, w, win, ho, wo, &mut out);
    Tensor::new(vec![c, h, w], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_into<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let ncols = ho * wo;
    let pad = win.pad as isize;
    out.fill(T::ZERO);
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (ch * win.kh + ki) * win.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
