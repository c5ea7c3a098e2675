//! Dense row-major tensors.
//!
//! `Tensor` (= `TensorBase<f32>`) is the value type every module trades in:
//! a shape, a flat buffer, and an optional gradient buffer that the autodiff
//! tape fills in after `backward()`.

use crate::error::{CoreError, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// The `f32` tensor used for all model state.
pub type Tensor = TensorBase<f32>;

impl<T: Real> TensorBase<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::InvalidDimension {
                op: "from_vec",
                msg: format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidDimension {
                op: "from_vec",
                msg: format!("zero-sized dimension in shape {:?}", shape),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    /// Identity matrix. `eye(n) . a == a` holds bitwise for any `a`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn cast<U: Real>(&self) -> TensorBase<U> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Asserts the `product(shape) == len(data)` / grad-shape invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::InvalidDimension {
                op: "check_invariants",
                msg: format!("shape {:?} vs data length {}", self.shape, self.data.len()),
            });
        }
        if let Some(g) = &self.grad {
            if g.len() != self.data.len() {
                return Err(CoreError::InvalidDimension {
                    op: "check_invariants",
                    msg: format!("grad length {} vs data length {}", g.len(), self.data.len()),
                });
            }
        }
        Ok(())
    }
}

impl<T: Real> AsRef<TensorBase<T>> for TensorBase<T> {
    fn as_ref(&self) -> &TensorBase<T> {
        self
    }
}

impl Tensor {
    /// Squared Euclidean distance between two equally-shaped tensors,
    /// accumulated in 64-bit.
    pub fn sq_euclidean_to(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "sq_euclidean",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut acc = 0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a as f64) - (*b as f64);
            acc += d * d;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::eye(3);
        assert_eq!(i.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(i.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sq_euclidean_of_identical_inputs_is_zero() {
        let v = Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        assert_eq!(v.sq_euclidean_to(&v).unwrap(), 0.0);
    }

    #[test]
    fn grad_invariant_checked() {
        let mut t = Tensor::zeros(vec![2, 2]);
        t.grad = Some(vec![0.0; 3]);
        assert!(t.check_invariants().is_err());
        t.grad = Some(vec![0.0; 4]);
        assert!(t.check_invariants().is_ok());
    }
}
