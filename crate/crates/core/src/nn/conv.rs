use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matmul::{matmul, Mat};
use super::{Float, Maps};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// 3x3, stride 1, same padding.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    /// 3x3, stride 2, padding 1 (halves the spatial size, rounding up).
    pub fn down3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

/// 2-D convolution with bias. Weights are `[out, in * k * k]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub geom: ConvGeom,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Conv2d<T> {
    pub fn zeros(geom: ConvGeom) -> Self {
        Self {
            geom,
            weight: vec![T::zero(); geom.out_channels * geom.patch_len()],
            bias: vec![T::zero(); geom.out_channels],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(geom: ConvGeom, gain: f64, rng: &mut R) -> Self {
        let mut conv = Self::zeros(geom);
        let bound = gain * (3.0 / geom.patch_len() as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        conv
    }

    fn weight_mat(&self) -> Mat<'_, T> {
        Mat::row_major(&self.weight, self.geom.out_channels, self.geom.patch_len())
    }

    /// Returns the output maps and the im2col buffer needed for backward.
    pub fn forward(&self, x: &Maps<T>) -> (Maps<T>, Vec<T>) {
        assert_eq!(x.channels, self.geom.in_channels, "conv input channels");
        let (oh, ow) = self.geom.out_size(x.height, x.width);
        let cols_w = x.batch * oh * ow;
        let cols = im2col(x, &self.geom);
        let mut out = Maps::zeros(self.geom.out_channels, x.batch, oh, ow);
        matmul(
            &mut out.data,
            self.weight_mat(),
            Mat::row_major(&cols, self.geom.patch_len(), cols_w),
            false,
        );
        for (row, &b) in out.data.chunks_mut(cols_w).zip(&self.bias) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        (out, cols)
    }

    /// Accumulates parameter gradients into `grads` and optionally returns
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        cols: &[T],
        in_shape: (usize, usize, usize),
        grad_out: &Maps<T>,
        grads: &mut Conv2d<T>,
        want_input_grad: bool,
    ) -> Option<Maps<T>> {
        let cols_w = grad_out.batch * grad_out.height * grad_out.width;
        let k = self.geom.patch_len();
        let cout = self.geom.out_channels;
        let go = Mat::row_major(&grad_out.data, cout, cols_w);
        matmul(&mut grads.weight, go, Mat::row_major(cols, k, cols_w).t(), true);
        for (gb, row) in grads.bias.iter_mut().zip(grad_out.data.chunks(cols_w)) {
            *gb = row.iter().fold(*gb, |acc, &v| acc + v);
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); k * cols_w];
        matmul(&mut dcols, self.weight_mat().t(), go, false);
        let (c, h, w) = in_shape;
        debug_assert_eq!(c, self.geom.in_channels);
        Some(col2im(&dcols, &self.geom, grad_out.batch, h, w))
    }
}

/// Valid `(lo, hi)` range of output columns whose input column `o*s + kx - p`
/// lies inside `[0, w)`.
fn valid_range(out: usize, size: usize, offset: usize, g: &ConvGeom) -> (usize, usize) {
    let s = g.stride;
    let p = g.padding;
    // o*s + offset >= p
    let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
    // o*s + offset - p < size  <=>  o*s < size + p - offset
    let hi = if size + p > offset {
        (size + p - offset).div_ceil(s).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Patch matrix `[Cin * k * k, N * OH * OW]`.
fn im2col<T: Float>(x: &Maps<T>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_size(x.height, x.width);
    let (h, w) = (x.height, x.width);
    let k = g.kernel;
    let cols_w = x.batch * oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * cols_w];
    for ci in 0..g.in_channels {
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, h, ky, g);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, w, kx, g);
                let row = &mut cols[((ci * k + ky) * k + kx) * cols_w..][..cols_w];
                for n in 0..x.batch {
                    let plane = x.plane(ci, n);
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.padding;
                        let src = &plane[iy * w..][..w];
                        let dst = &mut row[(n * oh + oy) * ow..][..ow];
                        if g.stride == 1 {
                            let shift = kx as isize - g.padding as isize;
                            let a = (xlo as isize + shift) as usize;
                            dst[xlo..xhi].copy_from_slice(&src[a..a + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = src[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im<T: Float>(dcols: &[T], g: &ConvGeom, batch: usize, h: usize, w: usize) -> Maps<T> {
    let (oh, ow) = g.out_size(h, w);
    let k = g.kernel;
    let cols_w = batch * oh * ow;
    let mut out = Maps::zeros(g.in_channels, batch, h, w);
    for ci in 0..g.in_channels {
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, h, ky, g);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, w, kx, g);
                let row = &dcols[((ci * k + ky) * k + kx) * cols_w..][..cols_w];
                for n in 0..batch {
                    let plane = out.plane_mut(ci, n);
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.padding;
                        let dst = &mut plane[iy * w..][..w];
                        let src = &row[(n * oh + oy) * ow..][..ow];
                        if g.stride == 1 {
                            let a = xlo + kx - g.padding;
                            for (d, &s) in dst[a..a + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                                *d = *d + s;
                            }
                        } else {
                            for (ox, &s) in src.iter().enumerate().take(xhi).skip(xlo) {
                                let ix = ox * g.stride + kx - g.padding;
                                dst[ix] = dst[ix] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
