//! Dense row-major f64 tensor.
//!
//! Values are plain owned buffers: cloning copies, moving between threads is
//! safe, and nothing here is shared. Gradients live next to the data and are
//! populated by [`crate::graph::Graph::backward`] through a parameter binding;
//! repeated backward passes accumulate until [`Tensor::zero_grad`] is called.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {dims:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        Self { dims, data: vec![0.0; numel], grad: None }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let numel: usize = dims.iter().product();
        Self { dims, data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![1], data: vec![value], grad: None }
    }

    /// Row-major matrix from nested rows; rows must be equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Tensor::from_vec(vec![m, n], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "gradient has {} elements, tensor has {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} (extent {d})");
            flat = flat * d + ix;
        }
        flat
    }
}

/// Numerically stable softmax of one slice, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a slice into a fresh vector.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}
