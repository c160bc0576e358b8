//! Dense 5-axis tensors for the reconstruction network.
//!
//! Shapes are always `(batch, channels, depth, height, width)` with the
//! width axis fastest, matching the x-fastest layout of `VoxelGrid` (width
//! maps to x). Elements default to `f64`; `f32` is available for speed at
//! relaxed verification tolerances.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar element of a tensor. `f64` is the default precision; `f32` is the
/// optional fast mode.
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Tensor shape `(n, c, d, h, w)`.
pub type Shape = [usize; 5];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor (w fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![E::zero(); numel(shape)],
        }
    }

    pub fn filled(shape: Shape, value: E) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Scalar tensor of shape (1,1,1,1,1).
    pub fn scalar(value: E) -> Self {
        Self {
            shape: [1, 1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Uniform random tensor in `[lo, hi)`; draws in row-major order.
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| E::from_f64(if lo == hi { lo } else { rng.gen_range(lo..hi) }))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1, 1, 1, 1, 1]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts elementwise through f64.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec([1, 1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(Tensor::<f64>::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(3.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 3.5);
        assert!(Tensor::<f64>::zeros([1, 2, 1, 1, 1]).item().is_err());
    }

    #[test]
    fn rand_uniform_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::rand_uniform([1, 2, 2, 2, 2], -1.0, 1.0, &mut r1);
        let b = Tensor::<f64>::rand_uniform([1, 2, 2, 2, 2], -1.0, 1.0, &mut r2);
        assert_eq!(a, b);
    }
}
