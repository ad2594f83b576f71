//! Zero-mean Gaussian process draws via Cholesky factors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky, matmul, matmul_nt, LinalgError, Matrix};

/// Diagonal jitter, relative to the kernel variance, added before every factorization.
pub const GP_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GpKernel {
    SqExp { l: f64, variance: f64 },
    SqExp2d { lx: f64, ly: f64, variance: f64 },
    Periodic { l: f64, period: f64, variance: f64 },
}

impl GpKernel {
    /// Covariance of two 1-D points. For the 2-D kernel use [`Self::eval_2d`].
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match *self {
            GpKernel::SqExp { l, variance } => variance * (-(a - b) * (a - b) / (2.0 * l * l)).exp(),
            GpKernel::SqExp2d { lx, variance, .. } => variance * (-(a - b) * (a - b) / (2.0 * lx * lx)).exp(),
            GpKernel::Periodic { l, period, variance } => {
                let s = (std::f64::consts::PI * (a - b).abs() / period).sin();
                variance * (-2.0 * s * s / (l * l)).exp()
            }
        }
    }

    pub fn eval_2d(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        match *self {
            GpKernel::SqExp2d { lx, ly, variance } => {
                let dx = a.0 - b.0;
                let dy = a.1 - b.1;
                variance * (-dx * dx / (2.0 * lx * lx) - dy * dy / (2.0 * ly * ly)).exp()
            }
            _ => self.eval(a.0, b.0),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            GpKernel::SqExp { variance, .. } | GpKernel::SqExp2d { variance, .. } | GpKernel::Periodic { variance, .. } => variance,
        }
    }

    pub fn covariance(&self, points: &[f64]) -> Matrix {
        Matrix::from_fn(points.len(), points.len(), |i, j| self.eval(points[i], points[j]))
    }
}

/// Cached factor for repeated 1-D draws on a fixed point set.
///
/// Points the kernel cannot tell apart (for example `0` and `p` under a
/// periodic kernel, or `0.0` and `-0.0`) share one latent value, so draws
/// agree exactly there.
#[derive(Debug, Clone)]
pub struct GpSampler {
    l: Matrix,
    slot: Vec<usize>,
}

impl GpSampler {
    pub fn new(kernel: &GpKernel, points: &[f64]) -> Result<Self, LinalgError> {
        let mut reps: Vec<f64> = Vec::new();
        let mut slot = Vec::with_capacity(points.len());
        for &p in points {
            let kpp = kernel.eval(p, p);
            let found = reps.iter().position(|&r| kernel.eval(r, p) == kpp && kernel.eval(r, r) == kpp);
            match found {
                Some(k) => slot.push(k),
                None => {
                    slot.push(reps.len());
                    reps.push(p);
                }
            }
        }
        let l = cholesky(&kernel.covariance(&reps), GP_JITTER * kernel.variance())?;
        Ok(GpSampler { l, slot })
    }

    pub fn distinct(&self) -> usize {
        self.l.rows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.l.rows();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut latent = vec![0.0; n];
        for (i, out) in latent.iter_mut().enumerate() {
            *out = crate::linalg::dot(&self.l.row(i)[..=i], &z[..=i]);
        }
        self.slot.iter().map(|&k| latent[k]).collect()
    }
}

/// One draw of `kernel` at `points`.
pub fn gp_sample<R: Rng + ?Sized>(kernel: &GpKernel, points: &[f64], rng: &mut R) -> Result<Vec<f64>, LinalgError> {
    Ok(GpSampler::new(kernel, points)?.sample(rng))
}

/// Draws of a separable 2-D squared exponential kernel on the tensor grid
/// `xs × ys`, as `L_y Z L_xᵀ`. The variance is carried by the `x` factor
/// and each factor gets its own jitter.
#[derive(Debug, Clone)]
pub struct GpSampler2d {
    lx: Matrix,
    ly: Matrix,
}

impl GpSampler2d {
    pub fn new(kernel: &GpKernel, xs: &[f64], ys: &[f64]) -> Result<Self, LinalgError> {
        let GpKernel::SqExp2d { lx, ly, variance } = *kernel else {
            return Err(LinalgError::InvalidArgument("tensor-grid sampling needs the 2-D squared exponential kernel".into()));
        };
        let kx = GpKernel::SqExp { l: lx, variance };
        let ky = GpKernel::SqExp { l: ly, variance: 1.0 };
        Ok(GpSampler2d {
            lx: cholesky(&kx.covariance(xs), GP_JITTER * variance)?,
            ly: cholesky(&ky.covariance(ys), GP_JITTER)?,
        })
    }

    /// Field with row `j` at `ys[j]` and column `i` at `xs[i]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        let z = Matrix::from_fn(self.ly.rows(), self.lx.rows(), |_, _| rng.sample(StandardNormal));
        let lz = matmul(&self.ly, &z).expect("square factor");
        matmul_nt(&lz, &self.lx).expect("square factor")
    }
}
