use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: S, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

impl Tensor<f64> {
    pub fn max_abs_diff(&self, other: &Tensor<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Row-wise softmax over the trailing axis with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks(cols) {
        let max = row_max(row);
        let start = out.len();
        let mut total = S::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Largest entry by primal value; the returned element keeps its tangent.
pub(crate) fn row_max<S: Scalar>(row: &[S]) -> S {
    let mut best = row[0];
    for &v in &row[1..] {
        if v.re() > best.re() {
            best = v;
        }
    }
    best
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row_max(row);
    let mut total = S::zero();
    for &v in row {
        total += (v - max).exp();
    }
    max + total.ln()
}
