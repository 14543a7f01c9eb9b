//! Dense f64 tensors participating in a reverse-mode differentiation tape.
//!
//! Layout is row-major and channels-first (`C x H x W`) throughout. A tensor
//! without a tape node is a constant and never receives a gradient.

mod fft;
mod tape;

pub use fft::{dft2_pair, fft1d};
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Clamp floor for logarithms and division denominators.
pub const EPS_NUM: f64 = 1e-12;

pub type NodeId = usize;

/// Position of a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub(crate) tape: u64,
    pub(crate) node: NodeId,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<TapeRef>,
    requires_grad: bool,
}

impl Tensor {
    /// Constant tensor from raw values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::shape("tensor", "zero-sized dimensions are not allowed"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::shape(
                "tensor",
                format!("shape {:?} expects {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros shape")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("full shape")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![value]).expect("scalar")
    }

    pub(crate) fn with_node(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        node: TapeRef,
        requires_grad: bool,
    ) -> Tensor {
        Tensor {
            shape,
            data,
            node: Some(node),
            requires_grad,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero-sized dims are rejected at construction
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn node(&self) -> Option<TapeRef> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::NonScalarRoot {
                shape: self.shape.clone(),
            })
        }
    }

    /// Constant copy sharing the same storage; cut loose from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Constant 0/1 tensor: 1 where value > threshold (strict).
    pub fn binarize_gt(&self, threshold: f64) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum_value(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_value(&self) -> f64 {
        self.sum_value() / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pair of same-shape real tensors holding the real and imaginary planes of
/// a per-channel 2-D spectrum.
#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<ComplexTensor> {
        if re.shape() != im.shape() {
            return Err(CoreError::shape(
                "complex",
                format!("real {:?} vs imaginary {:?}", re.shape(), im.shape()),
            ));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.scalar_value().unwrap(), 4.5);
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::from_vec(vec![3], vec![0.49, 0.5, 0.51]).unwrap();
        let b = t.binarize_gt(0.5);
        assert_eq!(b.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn complex_parts_share_shape() {
        let re = Tensor::zeros(vec![1, 2, 2]);
        let im = Tensor::zeros(vec![1, 2, 3]);
        assert!(ComplexTensor::new(re, im).is_err());
    }
}
