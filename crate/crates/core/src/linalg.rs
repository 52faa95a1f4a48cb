//! Small dense row-major matrices and a Cholesky factorization.
//!
//! The MPC problems here are tiny (the decision vector is `Nc` long, with
//! `Nc = 1` by default), so a hand-rolled dense representation is all that
//! is needed and keeps the core generic over the scalar type.

use std::ops::{Index, IndexMut};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.iter().flatten().copied().collect() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)] + a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "vector length differs from column count");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.rows, v.len(), "vector length differs from row count");
        let mut out = vec![S::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn scale(&self, k: S) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * k).collect() }
    }

    /// Stacks `blocks` vertically. All blocks must share the column count.
    pub fn vstack(blocks: &[&Self]) -> Self {
        let cols = blocks.first().map_or(0, |b| b.cols);
        assert!(blocks.iter().all(|b| b.cols == cols), "column counts differ");
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.data.len()).sum());
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Self { rows: blocks.iter().map(|b| b.rows).sum(), cols, data }
    }

    /// Largest relative asymmetry `|a_ij − a_ji| / max(1, |a_ij|, |a_ji|)`.
    pub fn asymmetry(&self) -> S {
        let mut worst = S::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                let (a, b) = (self[(i, j)], self[(j, i)]);
                let scale = S::one().max(a.abs()).max(b.abs());
                worst = worst.max((a - b).abs() / scale);
            }
        }
        worst
    }
}

impl<S> Index<(usize, usize)> for Matrix<S> {
    type Output = S;

    fn index(&self, (i, j): (usize, usize)) -> &S {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Matrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Lower-triangular factor `L` with `M = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<S> {
    l: Matrix<S>,
}

impl<S: Scalar> Cholesky<S> {
    /// Returns `None` when `m` is not square or not numerically positive definite.
    pub fn factor(m: &Matrix<S>) -> Option<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return None;
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !(d > S::zero()) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `M·x = b`.
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s = s - self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves `M·X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(b.nrows(), self.dim());
        let mut out = Matrix::zeros(b.nrows(), b.ncols());
        let mut col = vec![S::zero(); b.nrows()];
        for j in 0..b.ncols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            for (i, x) in self.solve(&col).into_iter().enumerate() {
                out[(i, j)] = x;
            }
        }
        out
    }

    pub fn inverse(&self) -> Matrix<S> {
        self.solve_matrix(&Matrix::identity(self.dim()))
    }
}
