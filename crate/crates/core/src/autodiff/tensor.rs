// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional accumulated gradient.
///
/// Values held outside a [`Tape`](super::Tape) are plain snapshots; they can be
/// moved between threads freely. Gradients land here only through
/// [`Tape::accumulate_grad`](super::Tape::accumulate_grad).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values but {} were given", data.len()),
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1, 1], data: vec![value], requires_grad: false, grad: None }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<S>) -> Self {
        Self { shape: vec![1, values.len()], data: values, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of length {} for tensor of length {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    /// `(rows, cols)`, treating rank-1 tensors as a single row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row_slice(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", format!("tensor of shape {:?} is not a scalar", self.shape)))
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Self {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| S::of(x)).collect(),
            requires_grad: t.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
