//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a plain value type ([`Tensor`]), a
//! linear tape that records executed ops ([`tape::Tape`]), and an AdamW
//! optimizer ([`optim::AdamW`]). The tape's append order is a topological
//! order of the compute graph, so the backward pass is a single reverse
//! sweep that visits each node exactly once. All reductions run in a fixed
//! sequential row-major order, which makes every forward and backward pass
//! bit-reproducible for a given input.

pub mod optim;
pub mod scalar;
pub mod tape;

pub use optim::{AdamW, AdamWConfig};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Tape};

use crate::error::{Result, WmaeError};

/// Dense row-major tensor. Immutable in spirit: ops produce new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single stored value of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(WmaeError::NonFinite(what.to_string()))
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }

    #[test]
    fn scalar_tensor_item() {
        let t = Tensor::<f64>::scalar(2.5);
        assert_eq!(t.item(), 2.5);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn finite_check_reports() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]);
        let err = t.check_finite("loss").unwrap_err();
        assert!(matches!(err, WmaeError::NonFinite(_)));
    }
}
