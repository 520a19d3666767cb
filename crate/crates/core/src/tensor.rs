//! Dense row-major tensors of `f64`.
//!
//! Values are kept in full precision; quantized tensors are simply tensors
//! whose entries happen to lie on a low-precision grid.

use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(QsimError::LengthMismatch {
                context: format!("tensor of shape {shape:?}"),
                left: expected,
                right: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(QsimError::NonFinite(format!(
                "tensor of shape {shape:?} at flat index {pos}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length matches.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as a matrix: leading dims flattened into rows, last dim is columns.
    /// Rank-1 tensors are a single column.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [.., last] => (self.data.len() / (*last).max(1), *last),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(QsimError::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape(), "elementwise op")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape(), "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], context: &str) -> Result<()> {
        if self.shape != shape {
            return Err(QsimError::shape(context, shape, &self.shape));
        }
        Ok(())
    }

    /// Transpose of the matrix view.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.matrix_dims();
        let mut out = vec![0.0; self.data.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// `self · rhs` on matrix views; the result keeps `self`'s leading dims.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims();
        let (k2, n) = rhs.matrix_dims();
        if k != k2 || rhs.rank() != 2 {
            return Err(QsimError::shape("matmul", &[k, n], rhs.shape()));
        }
        let out = matmul_raw(&self.data, &rhs.data, m, k, n);
        let shape = if self.rank() > 1 {
            let mut shape = self.shape.clone();
            *shape.last_mut().unwrap() = n;
            shape
        } else {
            vec![m, n]
        };
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn sum_squared_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape(), "squared error")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sum_squared_diff(other)? / self.data.len().max(1) as f64)
    }
}

/// Row-major `a[m×k] · b[k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-major `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-major `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
