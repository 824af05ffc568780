//! Small dense row-major matrices.
//!
//! Every reduction runs in ascending index order so results are bit-identical
//! across platforms and thread counts.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix storage", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::dim("matrix row length", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * x`. Panics on a length mismatch; callers validate shapes.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec: input length");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "t_matvec: input length");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in dst.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self += alpha * u v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], alpha: f64) {
        assert_eq!(u.len(), self.rows, "add_outer: row vector");
        assert_eq!(v.len(), self.cols, "add_outer: column vector");
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            let dst = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &vj) in dst.iter_mut().zip(v) {
                *o += s * vj;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn divided(&self, denom: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v / denom).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// `<self, other>_F`, the sum of entrywise products.
    pub fn frobenius_inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Matrix, context: &str) -> Result<()> {
        if self.rows != other.rows {
            return Err(Error::dim(format!("{context} rows"), self.rows, other.rows));
        }
        if self.cols != other.cols {
            return Err(Error::dim(format!("{context} cols"), self.cols, other.cols));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
