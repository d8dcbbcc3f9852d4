//! Minimal CPU convolutional network engine.
//!
//! Feature maps are stored channel-major (`[C, N, H, W]`) so that an im2col
//! convolution is a single GEMM whose output is already the next layer's
//! input layout. Every layer has a hand-written backward pass; parameters
//! are plain `Vec`s so optimizers, checkpoints and finite-difference checks
//! can walk them uniformly.

mod adam;
mod conv;
mod maps;
mod matmul;
mod stack;

pub use adam::Adam;
pub use conv::{Conv2d, ConvGeom};
pub use maps::Maps;
pub use stack::{sigmoid, Activation, ConvStack, StackTape};

use std::fmt::Debug;

/// Scalar type the engine runs in. Training uses `f32`; gradient checks use `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Uniform access to every trainable tensor of a model, in a fixed order.
pub trait Params<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    /// A structurally identical model with every parameter set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool
    where
        T: Float,
    {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of every parameter.
    fn flat(&self) -> Vec<T>
    where
        T: Copy,
    {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }
}
