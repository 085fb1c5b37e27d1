use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
///
/// `shape.iter().product() == values.len()` always holds. Public constructors
/// also reject non-finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite tensor entry at {i}")));
        }
        Ok(Self { shape, values })
    }

    /// One-dimensional tensor.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
        }
    }

    /// Builds without the finiteness check. Callers guarantee the shape invariant.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension for 2-D tensors, 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Converts element type, e.g. f64 → f32.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::vector(vec![1.0, f64::NAN]),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn row_access() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.get(0, 2), 3.0);
        let v = Tensor::vector(vec![1.0f32, 2.0]).unwrap();
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cast::<f64>().values(), &[1.0, 2.0]);
    }
}
