//! Minimal dense row-major matrix and vector helpers.
//!
//! Embedding tables are small enough (node count x code width) that a plain
//! `Vec<f64>` with explicit loops beats pulling a full linear-algebra stack
//! into a `no_std` crate. Everything here iterates in a fixed order so results
//! are bit-reproducible across runs.

use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Wraps an existing row-major buffer. Panics if the length is not rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (r, out_r) in out.iter_mut().enumerate() {
            *out_r = dot(self.row(r), v);
        }
        out
    }

    /// `self^T * u` for a column vector `u` of length `rows`.
    #[allow(clippy::needless_range_loop)]
    pub fn tr_matvec(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let w = u[r];
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += w * x;
            }
        }
        out
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row index of the first non-finite entry, if any.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite()).map(|i| i / self.cols)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn l1_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| crate::math::abs(*x)).sum()
}
