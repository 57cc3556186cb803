//! Dense row-major `f32` matrices and the handful of kernels the rest of the
//! crate is built from.
//!
//! Values are stored as `f32`; every reduction accumulates in `f64` and is
//! rounded once when written back. Shapes never broadcast: any mismatch is an
//! [`Error::ShapeMismatch`].

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` into a new vector.
    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Scatters the rows of `self` into a `total_rows`-row matrix at the given
    /// positions; rows not named stay zero. Inverse of [`row_select`].
    pub fn scatter_rows(&self, indices: &[usize], total_rows: usize) -> Result<Matrix> {
        if indices.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                left: self.shape(),
                right: (indices.len(), self.cols),
            });
        }
        check_indices("scatter_rows", indices, total_rows)?;
        let mut out = Matrix::zeros(total_rows, self.cols);
        for (src, &dst) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        Ok(out)
    }
}

/// Standard matrix product, accumulated in `f64`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        accumulate_row(a.row(i), b, &mut acc);
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · m`, `x.len() == m.rows()`.
pub fn vec_mat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(Error::ShapeMismatch {
            op: "vec_mat",
            left: (1, x.len()),
            right: m.shape(),
        });
    }
    let mut acc = vec![0.0f64; m.cols];
    accumulate_row(x, m, &mut acc);
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

// acc[j] += Σ_k x[k]·m[k][j], with k visited in ascending order so that every
// output column sees the same summation order as a plain dot product.
#[inline]
fn accumulate_row(x: &[f32], m: &Matrix, acc: &mut [f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let xk = xk as f64;
        for (a, &w) in acc.iter_mut().zip(m.row(k)) {
            *a += xk * w as f64;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x·σ(x)`, evaluated in `f64` and rounded once.
#[inline]
pub fn swish_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * sigmoid(x)) as f32
}

pub fn swish(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| swish_scalar(v)).collect(),
    }
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "hadamard",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

fn check_indices(op: &'static str, indices: &[usize], bound: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= bound {
            return Err(Error::IndexOutOfRange {
                op,
                index: i,
                bound,
            });
        }
        if !seen.insert(i) {
            return Err(Error::DuplicateIndex { op, index: i });
        }
    }
    Ok(())
}

/// New matrix whose `j`-th column is column `indices[j]` of `m`.
pub fn column_select(m: &Matrix, indices: &[usize]) -> Result<Matrix> {
    check_indices("column_select", indices, m.cols)?;
    let mut data = Vec::with_capacity(m.rows * indices.len());
    for r in 0..m.rows {
        let row = m.row(r);
        data.extend(indices.iter().map(|&c| row[c]));
    }
    Ok(Matrix {
        rows: m.rows,
        cols: indices.len(),
        data,
    })
}

/// New matrix whose `j`-th row is row `indices[j]` of `m`.
pub fn row_select(m: &Matrix, indices: &[usize]) -> Result<Matrix> {
    check_indices("row_select", indices, m.rows)?;
    let mut data = Vec::with_capacity(indices.len() * m.cols);
    for &r in indices {
        data.extend_from_slice(m.row(r));
    }
    Ok(Matrix {
        rows: indices.len(),
        cols: m.cols,
        data,
    })
}

/// Numerically stable softmax (max subtraction, `f64` internally).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = v.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}
