//! Dense row-major `f64` matrices and the handful of kernels the solvers need.
//!
//! Storage is row-major throughout the crate. Data matrices put features (or
//! neurons) on rows and samples on columns, so a layer's pre-activation is the
//! product `W * p` of an `n_l x n_{l-1}` weight matrix and an `n_{l-1} x N`
//! activation matrix.
//!
//! [`matmul`] accumulates every output entry over the inner index in strictly
//! increasing order with separate multiply and add, so its result is
//! bit-identical to the textbook triple loop regardless of the blocking used
//! to keep it fast.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    /// `self + s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `bias[i]` to every entry of row `i`.
    pub fn add_row_bias(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape(),
                right: (bias.len(), 1),
            });
        }
        let mut out = self.clone();
        for (i, &b) in bias.iter().enumerate() {
            for x in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Sum of each row, accumulated left to right.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;
const NC: usize = 512;

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_accumulate(a.rows, a.cols, b.cols, &a.data, &b.data, &mut c.data);
    Ok(c)
}

/// `a^T * b` without the caller materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(&a.transpose(), b)
}

/// `a * b^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

// c += a * b, each c entry accumulated over k in increasing order. Blocks of
// b are packed into NR-wide column panels so the micro-kernel streams
// contiguous memory.
fn gemm_accumulate(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut panel = vec![0.0f64; KC * NC];
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        let kc = k1 - k0;
        for j0 in (0..n).step_by(NC) {
            let j1 = (j0 + NC).min(n);
            let full = (j1 - j0) / NR;
            for p in 0..full {
                let dst = &mut panel[p * kc * NR..(p + 1) * kc * NR];
                for kk in 0..kc {
                    let src = (k0 + kk) * n + j0 + p * NR;
                    dst[kk * NR..(kk + 1) * NR].copy_from_slice(&b[src..src + NR]);
                }
            }
            let jt = j0 + full * NR;
            let mut i = 0;
            while i + MR <= m {
                for p in 0..full {
                    let packed = &panel[p * kc * NR..(p + 1) * kc * NR];
                    micro_kernel(a, k, packed, c, n, i, j0 + p * NR, k0, k1);
                }
                if jt < j1 {
                    for r in i..i + MR {
                        row_tail(a, k, b, n, c, r, jt, j1, k0, k1);
                    }
                }
                i += MR;
            }
            for r in i..m {
                row_tail(a, k, b, n, c, r, j0, j1, k0, k1);
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_kernel(
    a: &[f64],
    lda: usize,
    packed: &[f64],
    c: &mut [f64],
    ldc: usize,
    i: usize,
    j: usize,
    k0: usize,
    k1: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, acc_row) in acc.iter_mut().enumerate() {
        acc_row.copy_from_slice(&c[(i + r) * ldc + j..(i + r) * ldc + j + NR]);
    }
    let arows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * lda + k0..(i + r) * lda + k1]);
    for (kk, brow) in packed.chunks_exact(NR).enumerate() {
        let brow: &[f64; NR] = brow.try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = arows[r][kk];
            for col in 0..NR {
                acc_row[col] += av * brow[col];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        c[(i + r) * ldc + j..(i + r) * ldc + j + NR].copy_from_slice(acc_row);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row_tail(
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    r: usize,
    j0: usize,
    j1: usize,
    k0: usize,
    k1: usize,
) {
    let crow = &mut c[r * ldb + j0..r * ldb + j1];
    for kk in k0..k1 {
        let av = a[r * lda + kk];
        let brow = &b[kk * ldb + j0..kk * ldb + j1];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

pub fn relu(z: &Matrix) -> Matrix {
    z.map(|x| x.max(0.0))
}

/// Squared Frobenius norm.
pub fn frob_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum()
}

/// `||a - b||_F^2` without allocating the difference.
pub fn frob_sq_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frob_sq_diff")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Entrywise inner product `sum(a .* b)`.
pub fn inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "inner")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Columnwise softmax with per-column max subtraction.
pub fn softmax_columns(z: &Matrix) -> Matrix {
    let (rows, cols) = z.shape();
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        let m = (0..rows).fold(f64::NEG_INFINITY, |m, i| m.max(z.get(i, j)));
        let mut s = 0.0;
        for i in 0..rows {
            let e = (z.get(i, j) - m).exp();
            out.set(i, j, e);
            s += e;
        }
        for i in 0..rows {
            out.set(i, j, out.get(i, j) / s);
        }
    }
    out
}

/// Checks that every column of `y` holds a single 1 and zeros elsewhere.
pub fn check_one_hot(y: &Matrix) -> Result<()> {
    for j in 0..y.cols {
        let mut ones = 0;
        for i in 0..y.rows {
            match y.get(i, j) {
                v if v == 1.0 => ones += 1,
                v if v == 0.0 => {}
                _ => return Err(Error::NotOneHot { column: j }),
            }
        }
        if ones != 1 {
            return Err(Error::NotOneHot { column: j });
        }
    }
    Ok(())
}

/// Cross-entropy of the columnwise softmax of `z` against one-hot `y`, summed
/// over samples, together with its gradient `softmax(z) - y`.
pub fn softmax_cross_entropy(z: &Matrix, y: &Matrix) -> Result<(f64, Matrix)> {
    z.check_same_shape(y, "softmax_cross_entropy")?;
    check_one_hot(y)?;
    Ok(softmax_cross_entropy_unchecked(z, y))
}

/// As [`softmax_cross_entropy`] but trusts the caller on shape and one-hot
/// labels. Used in solver inner loops where labels were validated once.
pub(crate) fn softmax_cross_entropy_unchecked(z: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let (rows, cols) = z.shape();
    let mut grad = Matrix::zeros(rows, cols);
    let mut loss = 0.0;
    for j in 0..cols {
        let mut imax = 0;
        for i in 1..rows {
            if z.get(i, j) > z.get(imax, j) {
                imax = i;
            }
        }
        let m = z.get(imax, j);
        // log-sum-exp as m + log1p(sum of the non-max terms) keeps precision
        // when one logit dominates
        let mut rest = 0.0;
        for i in 0..rows {
            let e = (z.get(i, j) - m).exp();
            grad.set(i, j, e);
            if i != imax {
                rest += e;
            }
        }
        let log_s = rest.ln_1p();
        let s = 1.0 + rest;
        for i in 0..rows {
            let yi = y.get(i, j);
            if yi != 0.0 {
                loss -= yi * (z.get(i, j) - m - log_s);
            }
            let g = if i == imax && yi == 1.0 {
                -rest / s
            } else {
                grad.get(i, j) / s - yi
            };
            grad.set(i, j, g);
        }
    }
    (loss, grad)
}

/// Loss only.
pub(crate) fn softmax_cross_entropy_loss(z: &Matrix, y: &Matrix) -> f64 {
    let (rows, cols) = z.shape();
    let mut loss = 0.0;
    for j in 0..cols {
        let mut imax = 0;
        for i in 1..rows {
            if z.get(i, j) > z.get(imax, j) {
                imax = i;
            }
        }
        let m = z.get(imax, j);
        let mut rest = 0.0;
        for i in 0..rows {
            if i != imax {
                rest += (z.get(i, j) - m).exp();
            }
        }
        let log_s = rest.ln_1p();
        for i in 0..rows {
            let yi = y.get(i, j);
            if yi != 0.0 {
                loss -= yi * (z.get(i, j) - m - log_s);
            }
        }
    }
    loss
}
