//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value buffer. Differentiable computation
//! goes through a [`Graph`], which records each primitive together with the
//! activations its backward pass needs and replays them in reverse.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod memory;

pub use graph::{Graph, Var, MIN_FEATURE_NORM};

use crate::error::{Error, Result};

#[derive(Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor data at flat index {i}"),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Skips validation; callers guarantee `data.len()` matches `shape`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        memory::record_alloc(data.len() * std::mem::size_of::<f64>());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.take() {
            memory::record_free(g.len() * std::mem::size_of::<f64>());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => {
                memory::record_alloc(delta.len() * std::mem::size_of::<f64>());
                self.grad = Some(delta.to_vec());
            }
        }
    }

    /// Mutable access to the values; used by optimizers only.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extent of a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn into_data(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    /// Exact row-major copy without the gradient buffer.
    pub fn detached(&self) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        let mut t = Self::from_parts(self.shape.clone(), self.data.clone());
        t.requires_grad = self.requires_grad;
        if let Some(g) = &self.grad {
            t.accumulate_grad(g);
        }
        t
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        let grad = self.grad.as_ref().map_or(0, Vec::len);
        memory::record_free((self.data.len() + grad) * std::mem::size_of::<f64>());
    }
}

/// Plain (untracked) matrix product, used where no graph is needed.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        kernels::matmul(&a.data, &b.data, m, k, n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn plain_matmul_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn memory_is_released_on_drop() {
        let before = memory::current_bytes();
        let (_, usage) = memory::measure(|| {
            let t = Tensor::zeros(&[16, 16]);
            drop(t);
        });
        assert_eq!(usage.peak_bytes, 16 * 16 * 8);
        assert_eq!(usage.retained_bytes, 0);
        assert_eq!(memory::current_bytes(), before);
    }
}
