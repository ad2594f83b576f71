//! Dense real linear algebra.
//!
//! Row-major [`Matrix`] with the products, Kronecker/commutation machinery,
//! Cholesky factorization and cyclic Jacobi eigensolver that the
//! least-squares step and the GP sampler are built on. Every routine is a
//! pure function with a fixed summation order, so results are bit-identical
//! across runs for identical inputs.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length mismatch: expected {expected}, got {got}")]
    InvalidData { expected: usize, got: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not positive semi-definite: eigenvalue {value:e}")]
    NotPositiveSemidefinite { value: f64 },
    #[error("regularization required: lambda = 0 with near-singular eigenvalues")]
    RegularizationRequired,
    #[error("singular system: no usable pivot in column {column}")]
    Singular { column: usize },
    #[error("index {value} at position {position} outside 1..={dim}")]
    IndexOutOfRange {
        position: usize,
        value: usize,
        dim: usize,
    },
    #[error("index list has length {alphas}, dimension list has length {dims}")]
    IndexArity { alphas: usize, dims: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix, row-major: `data[i * cols + j]` holds entry `(i, j)`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row slices.
    ///
    /// # Panics
    /// Panics if the rows have inconsistent lengths.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Column vector (n x 1).
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
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

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Column-wise vectorization `vec(X)`.
    pub fn vec_cols(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Inverse of [`Matrix::vec_cols`].
    pub fn from_vec_cols(rows: usize, cols: usize, v: &[f64]) -> Result<Matrix> {
        if v.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                expected: rows * cols,
                got: v.len(),
            });
        }
        Ok(Matrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
    }

    /// Row-wise vectorization, which equals `vec(Xᵀ)`.
    pub fn vec_rows(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

/// Dot product with four fixed interleaved accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let k = 4 * c;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// `a · b`, with the reduction index innermost.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let bt = b.transpose();
    Ok(matmul_nt_unchecked(a, &bt))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(matmul_nt_unchecked(a, b))
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(matmul_nt_unchecked(&a.transpose(), &b.transpose()))
}

fn matmul_nt_unchecked(a: &Matrix, bt: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, bt.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = &mut out.data[i * bt.rows..(i + 1) * bt.rows];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, bt.row(j));
        }
    }
    out
}

/// Kronecker product; entry `([r1,r2], [s1,s2])` is `x[r1,s1] * y[r2,s2]`.
pub fn kron(x: &Matrix, y: &Matrix) -> Matrix {
    let (r1, s1) = x.shape();
    let (r2, s2) = y.shape();
    let mut out = Matrix::zeros(r1 * r2, s1 * s2);
    for a in 0..r1 {
        for b in 0..s1 {
            let xab = x.get(a, b);
            for c in 0..r2 {
                let row = a * r2 + c;
                for d in 0..s2 {
                    out.set(row, b * s2 + d, xab * y.get(c, d));
                }
            }
        }
    }
    out
}

/// Commutation matrix `K_{r,s}`: the `rs x rs` permutation with
/// `K · vec(X) = vec(Xᵀ)` for every `r x s` matrix `X`.
pub fn commutation_matrix(r: usize, s: usize) -> Matrix {
    let mut k = Matrix::zeros(r * s, r * s);
    for i in 0..r {
        for j in 0..s {
            // vec(X)[i + r*j] = X[i,j] lands at vec(Xᵀ)[j + s*i]
            k.set(j + s * i, i + r * j, 1.0);
        }
    }
    k
}

/// 1-based lexicographic (last index fastest) flattening of a tensor index.
pub fn lex_index(alphas: &[usize], dims: &[usize]) -> Result<usize> {
    if alphas.len() != dims.len() || alphas.is_empty() {
        return Err(LinalgError::IndexArity {
            alphas: alphas.len(),
            dims: dims.len(),
        });
    }
    let mut idx = 0usize;
    for (m, (&a, &d)) in alphas.iter().zip(dims).enumerate() {
        if a < 1 || a > d {
            return Err(LinalgError::IndexOutOfRange {
                position: m,
                value: a,
                dim: d,
            });
        }
        idx = idx * d + (a - 1);
    }
    Ok(idx + 1)
}

/// Lower-triangular `L` with `L Lᵀ = a + jitter * I`.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if !(jitter >= 0.0) {
        return Err(LinalgError::InvalidArgument(format!(
            "jitter must be non-negative, got {jitter}"
        )));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let pivot = a.get(i, i) + jitter - s;
                if !(pivot > 0.0) {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i, value: pivot });
                }
                l.set(i, i, pivot.sqrt());
            } else {
                let v = (a.get(i, j) - s) / l.get(j, j);
                l.set(i, j, v);
            }
        }
    }
    Ok(l)
}

/// Solves `l · x = b` for lower-triangular `l`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s = dot(&l.row(i)[..i], &x[..i]);
        x[i] = (b[i] - s) / l.get(i, i);
    }
    x
}

/// `(q, d)` with `a = q · diag(d) · qᵀ`, `q` orthogonal, `d` ascending.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub q: Matrix,
    pub d: Vec<f64>,
}

impl SpectralDecomp {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.d.len();
        let qd = Matrix::from_fn(n, n, |i, j| self.q.get(i, j) * self.d[j]);
        matmul_nt_unchecked(&qd, &self.q)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(a + aᵀ)/2`. Sweeps continue until the
/// largest off-diagonal magnitude is at rounding level (`ε‖a‖_F`), or is at
/// most `1e-12 * ‖a‖_F` and no longer shrinking, or after 100 sweeps.
pub fn eigh(a: &Matrix) -> Result<SpectralDecomp> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Matrix::identity(n);
    let norm = m.frobenius_norm();
    let tol = JACOBI_REL_TOL * norm;
    let floor = f64::EPSILON * norm;
    let mut prev_off = f64::INFINITY;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m.get(p, q).abs());
            }
        }
        if off <= floor || (off <= tol && off >= 0.5 * prev_off) {
            break;
        }
        prev_off = off;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= 0.1 * floor || apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    let nkp = c * akp - s * akq;
                    let nkq = s * akp + c * akq;
                    m.set(k, p, nkp);
                    m.set(p, k, nkp);
                    m.set(k, q, nkq);
                    m.set(q, k, nkq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)).then(i.cmp(&j)));
    let d = order.iter().map(|&i| m.get(i, i)).collect();
    let q = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(SpectralDecomp { q, d })
}

/// Solves `a · x · b + lambda · x = e` for symmetric positive semi-definite
/// `a` (R x R) and `b` (S x S) through both spectral decompositions and an
/// entrywise division.
///
/// Eigenvalues in `[-1e-10 ‖·‖_F, 0)` are treated as zero. With `lambda == 0`
/// the solve is refused unless `min(d_a) * min(d_b)` clears
/// `1e-12 ‖a‖_F ‖b‖_F`.
pub fn solve_spsd_sylvester(a: &Matrix, b: &Matrix, e: &Matrix, lambda: f64) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if b.rows != b.cols {
        return Err(LinalgError::NotSquare {
            rows: b.rows,
            cols: b.cols,
        });
    }
    if e.shape() != (a.rows, b.rows) {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_spsd_sylvester",
            left: (a.rows, b.rows),
            right: e.shape(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LinalgError::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let ea = eigh(a)?;
    let eb = eigh(b)?;
    let fa = a.frobenius_norm();
    let fb = b.frobenius_norm();
    let da = clamp_spsd(&ea.d, fa)?;
    let db = clamp_spsd(&eb.d, fb)?;

    if lambda == 0.0 {
        let min_a = da.first().copied().unwrap_or(0.0);
        let min_b = db.first().copied().unwrap_or(0.0);
        if !(min_a * min_b > 1e-12 * fa * fb) {
            return Err(LinalgError::RegularizationRequired);
        }
    }

    let et = matmul(&matmul_tn(&ea.q, e)?, &eb.q)?;
    let y = Matrix::from_fn(a.rows, b.rows, |r, s| et.get(r, s) / (da[r] * db[s] + lambda));
    matmul_nt(&matmul(&ea.q, &y)?, &eb.q)
}

fn clamp_spsd(d: &[f64], scale: f64) -> Result<Vec<f64>> {
    let floor = -1e-10 * scale;
    d.iter()
        .map(|&v| {
            if v < floor {
                Err(LinalgError::NotPositiveSemidefinite { value: v })
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

/// Dense solve of `a x = rhs` by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    if rhs.len() != n {
        return Err(LinalgError::InvalidData {
            expected: n,
            got: rhs.len(),
        });
    }
    let mut m = a.clone();
    let mut x = rhs.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m.get(r, col).abs() > m.get(piv, col).abs() {
                piv = r;
            }
        }
        if m.get(piv, col) == 0.0 {
            return Err(LinalgError::Singular { column: col });
        }
        if piv != col {
            for j in 0..n {
                let t = m.get(col, j);
                m.set(col, j, m.get(piv, j));
                m.set(piv, j, t);
            }
            x.swap(col, piv);
        }
        let d = m.get(col, col);
        for r in col + 1..n {
            let f = m.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m.get(r, j) - f * m.get(col, j);
                m.set(r, j, v);
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m.get(i, j) * x[j];
        }
        x[i] = s / m.get(i, i);
    }
    Ok(x)
}
