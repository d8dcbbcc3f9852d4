use ndarray::{Array4, ArrayView4};

use super::Float;

/// Channel-major feature maps, `[channels, batch, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Maps<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Float> Maps<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The `[H, W]` plane of channel `c`, item `n`.
    pub fn plane(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane_len();
        &self.data[(c * self.batch + n) * p..][..p]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.plane_len();
        &mut self.data[(c * self.batch + n) * p..][..p]
    }

    /// Converts an `[N, C, H, W]` array into channel-major maps.
    pub fn from_nchw<S: Float>(x: ArrayView4<'_, S>) -> Self {
        let (n, c, h, w) = x.dim();
        let mut out = Self::zeros(c, n, h, w);
        for ni in 0..n {
            for ci in 0..c {
                let dst = out.plane_mut(ci, ni);
                for (d, s) in dst.iter_mut().zip(x.slice(ndarray::s![ni, ci, .., ..]).iter()) {
                    *d = T::of(s.as_f64());
                }
            }
        }
        out
    }

    pub fn to_nchw<S: Float>(&self) -> Array4<S> {
        let mut out = Array4::<S>::zeros((self.batch, self.channels, self.height, self.width));
        for ni in 0..self.batch {
            for ci in 0..self.channels {
                let src = self.plane(ci, ni);
                for (d, s) in out
                    .slice_mut(ndarray::s![ni, ci, .., ..])
                    .iter_mut()
                    .zip(src.iter())
                {
                    *d = S::of(s.as_f64());
                }
            }
        }
        out
    }

    /// Stacks `self` on top of `other` along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width),
            "concat_channels: batch/spatial mismatch"
        );
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self {
            channels: self.channels + other.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits off the first `channels` channels; inverse of [`Maps::concat_channels`].
    pub fn split_channels(mut self, channels: usize) -> (Self, Self) {
        assert!(channels <= self.channels);
        let rest = self.data.split_off(channels * self.batch * self.plane_len());
        let tail = Self {
            channels: self.channels - channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: rest,
        };
        self.channels = channels;
        (self, tail)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "sub: shape mismatch");
        self.zip_map(other, |a, b| a - b)
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Self {
        Self {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.batch, self.height, self.width)
            == (other.channels, other.batch, other.height, other.width)
    }
}
