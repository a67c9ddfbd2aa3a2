use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Most of the stack only needs matrices; helpers such as [`Tensor::rows`]
/// assume a rank-2 shape and a row vector is stored as `1 x n`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![1, n], values).expect("row vector must be non-empty")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), fans taken from the matrix shape.
    pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn require_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self · other`. Every dot product is accumulated left to right over the inner index.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_nt")?;
        other.require_matrix("matmul_nt")?;
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions disagree: {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_tn")?;
        other.require_matrix("matmul_tn")?;
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tn inner dimensions disagree: {:?}ᵀ x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x n` row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.require_matrix("add_row")?;
        if row.shape != [1, self.cols()] {
            return Err(Error::Dimension(format!(
                "add_row: cannot broadcast {:?} over {:?}",
                row.shape, self.shape
            )));
        }
        let n = self.cols();
        let mut out = self.clone();
        for r in out.data.chunks_mut(n) {
            for (a, b) in r.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Result<Tensor> {
        self.require_matrix("col_slice")?;
        if start + width > self.cols() || width == 0 {
            return Err(Error::Dimension(format!(
                "col_slice [{start}, {}) out of range for {:?}",
                start + width,
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(self.rows() * width);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Tensor {
            shape: vec![self.rows(), width],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let m = first.rows();
        if parts.iter().any(|p| p.shape.len() != 2 || p.rows() != m) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
