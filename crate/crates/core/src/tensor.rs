//! Dense `[channels, height, width]` arrays and the layer primitives needed
//! for a forward pass and for data-gradient back-propagation.
//!
//! Only data gradients exist here: the network weights are imported and never
//! trained, so no weight-gradient kernels are provided.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "tensor data has {} values, shape {}x{}x{} needs {}",
                data.len(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions per channel.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
    }

    /// Element type conversion through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        ensure_same_shape(self, other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn ensure_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Kernel size of every convolution in the network.
pub const KERNEL: usize = 3;

/// Weights of a 3×3, stride 1, zero-padding 1 convolution.
///
/// Kernel layout is `[out][in][ky][kx]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    c_out: usize,
    c_in: usize,
    kernel: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(c_out: usize, c_in: usize, kernel: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if kernel.len() != c_out * c_in * KERNEL * KERNEL {
            return Err(Error::config(format!(
                "kernel has {} values, expected {}x{}x3x3 = {}",
                kernel.len(),
                c_out,
                c_in,
                c_out * c_in * KERNEL * KERNEL
            )));
        }
        if bias.len() != c_out {
            return Err(Error::config(format!(
                "bias has {} values, expected {}",
                bias.len(),
                c_out
            )));
        }
        Ok(ConvWeights {
            c_out,
            c_in,
            kernel,
            bias,
        })
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.c_out
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel(&self) -> &[T] {
        &self.kernel
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, ky: usize, kx: usize) -> T {
        self.kernel[((o * self.c_in + c) * KERNEL + ky) * KERNEL + kx]
    }

    fn taps(&self, o: usize, c: usize) -> &[T] {
        let start = (o * self.c_in + c) * KERNEL * KERNEL;
        &self.kernel[start..start + KERNEL * KERNEL]
    }

    pub fn cast<U: Real>(&self) -> ConvWeights<U> {
        ConvWeights {
            c_out: self.c_out,
            c_in: self.c_in,
            kernel: self.kernel.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// `dst[y, x] += coeff * src[y + dy, x + dx]` wherever the source index is in
/// bounds; out-of-range sources read as zero.
#[inline]
fn accumulate_shifted<T: Real>(
    dst: &mut [T],
    rows: Range<usize>,
    src: &[T],
    (height, width): (usize, usize),
    dy: isize,
    dx: isize,
    coeff: T,
) {
    let y0 = ((-dy).max(0) as usize).max(rows.start);
    let y1 = ((height as isize - dy).min(height as isize).max(0) as usize).min(rows.end);
    let x0 = (-dx).max(0) as usize;
    let x1 = (width as isize - dx).min(width as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let dr = (y - rows.start) * width;
        let d = &mut dst[dr + x0..dr + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let s = &src[sy * width + sx0..sy * width + sx0 + (x1 - x0)];
        for (a, &b) in d.iter_mut().zip(s) {
            *a = *a + coeff * b;
        }
    }
}

/// Row bands small enough for a destination band to stay in cache.
fn row_bands(height: usize, width: usize) -> impl Iterator<Item = Range<usize>> {
    let rows = (4096 / width.max(1)).max(1);
    (0..height).step_by(rows).map(move |y| y..(y + rows).min(height))
}

/// Same-size 3×3 convolution (cross-correlation), zero padding 1, stride 1.
///
/// Each output element starts from the bias and accumulates over
/// `(c, ky, kx)` in lexicographic order, so results do not depend on the
/// thread count.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    if input.channels() != w.c_in() {
        return Err(Error::config(format!(
            "convolution expects {} input channels, got {}",
            w.c_in(),
            input.channels()
        )));
    }
    let (h, wd) = (input.height(), input.width());
    let plane = h * wd;
    let mut out = Tensor::zeros(w.c_out(), h, wd);
    out.as_mut_slice()
        .par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(o, dst)| {
            dst.fill(w.bias[o]);
            for rows in row_bands(h, wd) {
                let band = &mut dst[rows.start * wd..rows.end * wd];
                for c in 0..w.c_in() {
                    let src = input.plane(c);
                    for (k, &coeff) in w.taps(o, c).iter().enumerate() {
                        if coeff == T::zero() {
                            continue;
                        }
                        let dy = (k / KERNEL) as isize - 1;
                        let dx = (k % KERNEL) as isize - 1;
                        accumulate_shifted(band, rows.clone(), src, (h, wd), dy, dx, coeff);
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of a scalar loss with respect to the convolution input, given
/// its gradient with respect to the output. The bias does not contribute.
pub fn conv2d_backward_data<T: Real>(
    grad_out: &Tensor<T>,
    w: &ConvWeights<T>,
) -> Result<Tensor<T>> {
    if grad_out.channels() != w.c_out() {
        return Err(Error::config(format!(
            "convolution backward expects {} gradient channels, got {}",
            w.c_out(),
            grad_out.channels()
        )));
    }
    let (h, wd) = (grad_out.height(), grad_out.width());
    let plane = h * wd;
    let mut grad_in = Tensor::zeros(w.c_in(), h, wd);
    grad_in
        .as_mut_slice()
        .par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(c, dst)| {
            for rows in row_bands(h, wd) {
                let band = &mut dst[rows.start * wd..rows.end * wd];
                for o in 0..w.c_out() {
                    let src = grad_out.plane(o);
                    for (k, &coeff) in w.taps(o, c).iter().enumerate() {
                        if coeff == T::zero() {
                            continue;
                        }
                        let dy = 1 - (k / KERNEL) as isize;
                        let dx = 1 - (k % KERNEL) as isize;
                        accumulate_shifted(band, rows.clone(), src, (h, wd), dy, dx, coeff);
                    }
                }
            }
        });
    Ok(grad_in)
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU data gradient. The subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, x_pre: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(grad_out, x_pre, "relu backward")?;
    let data = grad_out
        .as_slice()
        .iter()
        .zip(x_pre.as_slice())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad_out.channels(), grad_out.height(), grad_out.width(), data)
}

/// 2×2 stride-2 average pooling. An odd trailing row or column is dropped.
pub fn avgpool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.shape();
    if h < 2 || w < 2 {
        return Err(Error::config(format!(
            "average pooling needs at least 2x2 input, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    let mut out = Tensor::zeros(c, oh, ow);
    out.as_mut_slice()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ch, dst)| {
            let src = x.plane(ch);
            for y in 0..oh {
                let r0 = &src[2 * y * w..2 * y * w + w];
                let r1 = &src[(2 * y + 1) * w..(2 * y + 1) * w + w];
                for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    let s = r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1];
                    *d = s * quarter;
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`avgpool_forward`] for an input of `in_height × in_width`.
pub fn avgpool_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_height: usize,
    in_width: usize,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.shape();
    if in_height / 2 != oh || in_width / 2 != ow {
        return Err(Error::config(format!(
            "pool backward: gradient {oh}x{ow} does not match input {in_height}x{in_width}"
        )));
    }
    let quarter = T::of_f64(0.25);
    let mut out = Tensor::zeros(c, in_height, in_width);
    out.as_mut_slice()
        .par_chunks_mut((in_height * in_width).max(1))
        .enumerate()
        .for_each(|(ch, dst)| {
            let src = grad_out.plane(ch);
            for y in 0..oh {
                for x in 0..ow {
                    let g = src[y * ow + x] * quarter;
                    dst[2 * y * in_width + 2 * x] = g;
                    dst[2 * y * in_width + 2 * x + 1] = g;
                    dst[(2 * y + 1) * in_width + 2 * x] = g;
                    dst[(2 * y + 1) * in_width + 2 * x + 1] = g;
                }
            }
        });
    Ok(out)
}
