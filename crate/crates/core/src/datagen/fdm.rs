//! Finite-difference reference solvers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FdmError {
    #[error("Newton iteration did not converge at time step {step} (residual {residual:e})")]
    NewtonDiverged { step: usize, residual: f64 },
    #[error("matrix is not positive definite at row {0}")]
    NotPositiveDefinite(usize),
    #[error("zero pivot in tridiagonal solve at row {0}")]
    ZeroPivot(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, FdmError>;

/// Solves a tridiagonal system; `lower[0]` and `upper[n-1]` are ignored.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let a = if i > 0 { lower[i] } else { 0.0 };
        let cp = if i > 0 { c[i - 1] } else { 0.0 };
        let dp = if i > 0 { d[i - 1] } else { 0.0 };
        let m = diag[i] - a * cp;
        if m == 0.0 || !m.is_finite() {
            return Err(FdmError::ZeroPivot(i));
        }
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - a * dp) / m;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReactionGrid {
    /// Space nodes on `[0, 1]`, boundaries included.
    pub nx: usize,
    /// Time levels on `[0, 1]`, `t = 0` included.
    pub nt: usize,
    pub diffusion: f64,
    pub reaction: f64,
}

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 50;

/// Backward Euler in time, central differences in space, for
/// `u_t = D u_xx + k u² + f(x)` with zero initial and boundary values.
/// Returns an `nt × nx` field, row `j` at time level `j`.
pub fn fdm_diffusion_reaction(f: &[f64], grid: &DiffusionReactionGrid) -> Result<Matrix> {
    let (nx, nt) = (grid.nx, grid.nt);
    if f.len() != nx || nx < 3 || nt < 2 {
        return Err(FdmError::Shape(format!("source of length {} on a {nx}x{nt} grid", f.len())));
    }
    let h = 1.0 / (nx - 1) as f64;
    let dt = 1.0 / (nt - 1) as f64;
    let r = grid.diffusion * dt / (h * h);
    let m = nx - 2;
    let mut out = Matrix::zeros(nt, nx);
    let mut prev = vec![0.0; m];
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut res = vec![0.0; m];
    for step in 1..nt {
        let mut u = prev.clone();
        let mut converged = false;
        let mut last = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            for i in 0..m {
                let left = if i > 0 { u[i - 1] } else { 0.0 };
                let right = if i + 1 < m { u[i + 1] } else { 0.0 };
                res[i] = u[i] - prev[i] - r * (left - 2.0 * u[i] + right) - dt * (grid.reaction * u[i] * u[i] + f[i + 1]);
                lower[i] = -r;
                upper[i] = -r;
                diag[i] = 1.0 + 2.0 * r - 2.0 * dt * grid.reaction * u[i];
            }
            last = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if last <= NEWTON_TOL {
                converged = true;
                break;
            }
            let du = thomas(&lower, &diag, &upper, &res)?;
            for (ui, d) in u.iter_mut().zip(&du) {
                *ui -= d;
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(FdmError::NewtonDiverged { step, residual: f64::INFINITY });
            }
        }
        if !converged {
            return Err(FdmError::NewtonDiverged { step, residual: last });
        }
        out.row_mut(step)[1..nx - 1].copy_from_slice(&u);
        prev = u;
    }
    Ok(out)
}

/// Lower band of a symmetric positive definite banded matrix, factored in place.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    /// `entries(i, j)` for `i - w <= j <= i` gives the lower band.
    pub fn factor(n: usize, w: usize, entries: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let stride = w + 1;
        let mut band = vec![0.0; n * stride];
        for i in 0..n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let mut s = entries(i, j);
                for k in lo.max(j.saturating_sub(w))..j {
                    s -= band[i * stride + (i - k)] * band[j * stride + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(FdmError::NotPositiveDefinite(i));
                    }
                    band[i * stride] = s.sqrt();
                } else {
                    band[i * stride + (i - j)] = s / band[j * stride];
                }
            }
        }
        Ok(BandedCholesky { n, w, band })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, w, stride) = (self.n, self.w, self.w + 1);
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(w)..i {
                s -= self.band[i * stride + (i - k)] * y[k];
            }
            y[i] = s / self.band[i * stride];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n.min(i + w + 1) {
                s -= self.band[k * stride + (k - i)] * y[k];
            }
            y[i] = s / self.band[i * stride];
        }
        y
    }
}

/// Five-point flux-form discretization of `−∇·(κ∇u) = f` on the unit
/// square with `n × n` nodes; face coefficients are arithmetic means.
/// Fields are `n × n` with row `j` at `y_j` and column `i` at `x_i`.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    n: usize,
    kappa: Matrix,
    chol: BandedCholesky,
}

impl PoissonSolver {
    pub fn new(kappa: &Matrix) -> Result<Self> {
        let n = kappa.rows();
        if kappa.cols() != n || n < 3 {
            return Err(FdmError::Shape(format!("kappa is {}x{}", kappa.rows(), kappa.cols())));
        }
        let m = n - 2;
        let inv_h2 = ((n - 1) * (n - 1)) as f64;
        let face = |a: (usize, usize), b: (usize, usize)| 0.5 * (kappa.get(a.1, a.0) + kappa.get(b.1, b.0));
        let node = |idx: usize| (idx % m + 1, idx / m + 1);
        let chol = BandedCholesky::factor(m * m, m, |r, c| {
            let (i, j) = node(r);
            if r == c {
                (face((i, j), (i + 1, j)) + face((i, j), (i - 1, j)) + face((i, j), (i, j + 1)) + face((i, j), (i, j - 1))) * inv_h2
            } else {
                let (ci, cj) = node(c);
                if (cj == j && ci + 1 == i) || (ci == i && cj + 1 == j) {
                    -face((i, j), (ci, cj)) * inv_h2
                } else {
                    0.0
                }
            }
        })?;
        Ok(PoissonSolver {
            n,
            kappa: kappa.clone(),
            chol,
        })
    }

    pub fn constant(n: usize) -> Result<Self> {
        Self::new(&Matrix::from_fn(n, n, |_, _| 1.0))
    }

    /// Solution with source `f` and Dirichlet data read off the boundary of `g`.
    pub fn solve(&self, f: &Matrix, g: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if f.shape() != (n, n) || g.shape() != (n, n) {
            return Err(FdmError::Shape(format!("fields must be {n}x{n}")));
        }
        let m = n - 2;
        let inv_h2 = ((n - 1) * (n - 1)) as f64;
        let k = &self.kappa;
        let face = |a: (usize, usize), b: (usize, usize)| 0.5 * (k.get(a.1, a.0) + k.get(b.1, b.0));
        let mut rhs = vec![0.0; m * m];
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let mut v = f.get(j, i);
                for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                    if ni == 0 || nj == 0 || ni == n - 1 || nj == n - 1 {
                        v += face((i, j), (ni, nj)) * inv_h2 * g.get(nj, ni);
                    }
                }
                rhs[(j - 1) * m + (i - 1)] = v;
            }
        }
        let x = self.chol.solve(&rhs);
        let mut u = Matrix::from_fn(n, n, |j, i| {
            if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                g.get(j, i)
            } else {
                0.0
            }
        });
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                u.set(j, i, x[(j - 1) * m + (i - 1)]);
            }
        }
        Ok(u)
    }

    /// `−∇_h·(κ∇_h u)` at interior nodes; zero on the boundary.
    pub fn apply(&self, u: &Matrix) -> Matrix {
        let n = self.n;
        let inv_h2 = ((n - 1) * (n - 1)) as f64;
        let k = &self.kappa;
        let face = |a: (usize, usize), b: (usize, usize)| 0.5 * (k.get(a.1, a.0) + k.get(b.1, b.0));
        Matrix::from_fn(n, n, |j, i| {
            if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                return 0.0;
            }
            let c = u.get(j, i);
            [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                .iter()
                .map(|&(ni, nj)| face((i, j), (ni, nj)) * (c - u.get(nj, ni)))
                .sum::<f64>()
                * inv_h2
        })
    }
}

pub fn fdm_poisson_variable(kappa: &Matrix, f: &Matrix, g: &Matrix) -> Result<Matrix> {
    PoissonSolver::new(kappa)?.solve(f, g)
}

/// Every `step`-th node in both directions of a square field.
pub fn restrict(field: &Matrix, step: usize) -> Matrix {
    let rows = (field.rows() - 1) / step + 1;
    let cols = (field.cols() - 1) / step + 1;
    Matrix::from_fn(rows, cols, |j, i| field.get(j * step, i * step))
}
