//! Fully connected and convolutional networks.
//!
//! Parameter gradients use hand-written reverse mode. Input derivatives
//! along one coordinate axis, up to second order, are propagated forward as
//! [`Jet2`] values; [`Fcn::jet_backward`] then differentiates any linear
//! functional of those jets with respect to the parameters.

mod cnn;

pub use cnn::{Cnn, CnnGrads, CnnTape, ConvGrads, ConvLayer, ImageShape};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matmul, matmul_nt, matmul_tn, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("activation {0:?} has no second derivative; second-order jets need a smooth activation")]
    NonSmooth(Activation),
    #[error("tape does not match the network: {0}")]
    Tape(&'static str),
    #[error("direction {dir} out of range for input dimension {dim}")]
    Direction { dir: usize, dim: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x / (1 + e^{-x})`
    Swish,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn value(self, x: f64) -> f64 {
        self.derivatives(x).0
    }

    /// `(σ, σ′, σ″, σ‴)` at `x`. For relu the second and third entries are
    /// zero placeholders; callers needing them must check [`Self::is_smooth`].
    pub fn derivatives(self, x: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Swish => {
                let s = 1.0 / (1.0 + (-x).exp());
                let g = s * (1.0 - s);
                let u = 1.0 - 2.0 * s;
                let d1 = s + x * g;
                let d2 = g * (2.0 + x * u);
                let d3 = g * (u * (3.0 + x * u) - 2.0 * x * g);
                (x * s, d1, d2, d3)
            }
            Activation::Tanh => {
                let t = x.tanh();
                let q = 1.0 - t * t;
                (t, q, -2.0 * t * q, q * (6.0 * t * t - 2.0))
            }
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0, 0.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0, 0.0)
                }
            }
            Activation::Identity => (x, 1.0, 0.0, 0.0),
        }
    }

    /// Pushes a jet through the activation by the chain rule.
    pub fn jet(self, j: Jet2) -> Jet2 {
        let (s0, s1, s2, _) = self.derivatives(j.v);
        Jet2 {
            v: s0,
            d1: s1 * j.d1,
            d2: s2 * j.d1 * j.d1 + s1 * j.d2,
        }
    }
}

/// Value with first and second derivative along one input direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet2 {
    pub fn constant(v: f64) -> Self {
        Self { v, d1: 0.0, d2: 0.0 }
    }

    /// The coordinate being differentiated.
    pub fn variable(v: f64) -> Self {
        Self { v, d1: 1.0, d2: 0.0 }
    }
}

impl std::ops::Add for Jet2 {
    type Output = Jet2;
    fn add(self, o: Jet2) -> Jet2 {
        Jet2 {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }
}

impl std::ops::Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, s: f64) -> Jet2 {
        Jet2 {
            v: self.v * s,
            d1: self.d1 * s,
            d2: self.d2 * s,
        }
    }
}

/// He normal initialization: i.i.d. `N(0, 2 / fan_in)` entries.
pub fn he_normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.w.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.rows()
    }

    fn affine(&self, x: &Matrix, with_bias: bool) -> Result<Matrix> {
        let mut z = matmul_nt(x, &self.w)?;
        if let (true, Some(b)) = (with_bias, &self.b) {
            for i in 0..z.rows() {
                for (zv, bv) in z.row_mut(i).iter_mut().zip(b) {
                    *zv += bv;
                }
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

/// Parameter gradients of an [`Fcn`], layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnGrads {
    pub layers: Vec<LayerGrads>,
}

impl FcnGrads {
    pub fn zeros_like(net: &Fcn) -> Self {
        FcnGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: l.b.as_ref().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FcnGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.axpy(1.0, &b.w).expect("matching gradient shapes");
            if let (Some(x), Some(y)) = (a.b.as_mut(), b.b.as_ref()) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
        }
    }

    /// Flattened in the same order as [`Fcn::write_params`].
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            if let Some(b) = &l.b {
                out.extend_from_slice(b);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.write_flat(&mut v);
        v
    }
}

/// Per-layer inputs and pre-activations from [`Fcn::forward`].
#[derive(Debug, Clone)]
pub struct FcnTape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

/// Batched jets: entry `(n, i)` of each matrix belongs to sample `n`, unit `i`.
#[derive(Debug, Clone)]
pub struct JetBatch {
    pub v: Matrix,
    pub d1: Matrix,
    pub d2: Matrix,
}

impl JetBatch {
    pub fn get(&self, n: usize, i: usize) -> Jet2 {
        Jet2 {
            v: self.v.get(n, i),
            d1: self.d1.get(n, i),
            d2: self.d2.get(n, i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JetTape {
    inputs: Vec<JetBatch>,
    pre: Vec<JetBatch>,
    second_order: bool,
}

/// Fully connected network; every layer applies its own activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Fcn {
    pub layers: Vec<DenseLayer>,
}

impl Fcn {
    /// He-normal weights, zero biases. `widths` includes the input width.
    pub fn he_normal<R: Rng + ?Sized>(
        widths: &[usize],
        act: Activation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                w: he_normal_init(w[1], w[0], w[0], rng),
                b: bias.then(|| vec![0.0; w[1]]),
                act,
            })
            .collect();
        Fcn { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data().len() + l.b.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            if let Some(b) = &l.b {
                out.extend_from_slice(b);
            }
        }
    }

    /// Reads parameters in [`Self::write_params`] order; returns the count used.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let n = l.w.data().len();
            l.w.data_mut().copy_from_slice(&src[k..k + n]);
            k += n;
            if let Some(b) = &mut l.b {
                let n = b.len();
                b.copy_from_slice(&src[k..k + n]);
                k += n;
            }
        }
        k
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(NetError::Shape {
                what: "fcn input width",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FcnTape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let z = l.affine(&a, true)?;
            let next = z.map(|v| l.act.value(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((a, FcnTape { inputs, pre }))
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(out.into_data())
    }

    /// Gradients of `Σ out_grad ⊙ output` w.r.t. all parameters and the input.
    pub fn backward(&self, tape: &FcnTape, out_grad: &Matrix) -> Result<(FcnGrads, Matrix)> {
        if tape.pre.len() != self.layers.len() {
            return Err(NetError::Tape("layer count"));
        }
        let last = tape.pre.last().ok_or(NetError::Tape("empty network"))?;
        if out_grad.shape() != last.shape() {
            return Err(NetError::Tape("output gradient shape"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = out_grad.clone();
        for (l, (input, z)) in self.layers.iter().zip(tape.inputs.iter().zip(&tape.pre)).rev() {
            let mut dz = g;
            for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *d *= l.act.derivatives(zv).1;
            }
            let w = matmul_tn(&dz, input)?;
            let b = l.b.as_ref().map(|_| column_sums(&dz));
            g = matmul(&dz, &l.w)?;
            grads.push(LayerGrads { w, b });
        }
        grads.reverse();
        Ok((FcnGrads { layers: grads }, g))
    }

    /// Forward jets along input axis `dir` for every row of `x`.
    ///
    /// Affine maps act componentwise on `(v, d1, d2)` (the bias only on `v`);
    /// activations use [`Activation::jet`]. With `second_order` every
    /// activation must be smooth.
    pub fn jet_forward(&self, x: &Matrix, dir: usize, second_order: bool) -> Result<(JetBatch, JetTape)> {
        self.check_input(x)?;
        if dir >= x.cols() {
            return Err(NetError::Direction { dir, dim: x.cols() });
        }
        if second_order {
            if let Some(l) = self.layers.iter().find(|l| !l.act.is_smooth()) {
                return Err(NetError::NonSmooth(l.act));
            }
        }
        let n = x.rows();
        let mut cur = JetBatch {
            v: x.clone(),
            d1: Matrix::from_fn(n, x.cols(), |_, j| if j == dir { 1.0 } else { 0.0 }),
            d2: Matrix::zeros(n, x.cols()),
        };
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = JetBatch {
                v: l.affine(&cur.v, true)?,
                d1: l.affine(&cur.d1, false)?,
                d2: l.affine(&cur.d2, false)?,
            };
            let (rows, cols) = z.v.shape();
            let mut out = JetBatch {
                v: Matrix::zeros(rows, cols),
                d1: Matrix::zeros(rows, cols),
                d2: Matrix::zeros(rows, cols),
            };
            for k in 0..rows * cols {
                let j = l.act.jet(Jet2 {
                    v: z.v.data()[k],
                    d1: z.d1.data()[k],
                    d2: z.d2.data()[k],
                });
                out.v.data_mut()[k] = j.v;
                out.d1.data_mut()[k] = j.d1;
                out.d2.data_mut()[k] = j.d2;
            }
            inputs.push(cur);
            pre.push(z);
            cur = out;
        }
        Ok((
            cur,
            JetTape {
                inputs,
                pre,
                second_order,
            },
        ))
    }

    /// Parameter gradient of `Σ (gv ⊙ v + gd1 ⊙ d1 + gd2 ⊙ d2)` over the
    /// output jets recorded in `tape`.
    pub fn jet_backward(&self, tape: &JetTape, gv: &Matrix, gd1: &Matrix, gd2: &Matrix) -> Result<FcnGrads> {
        if tape.pre.len() != self.layers.len() {
            return Err(NetError::Tape("layer count"));
        }
        let last = tape.pre.last().ok_or(NetError::Tape("empty network"))?;
        let shape = last.v.shape();
        if gv.shape() != shape || gd1.shape() != shape || gd2.shape() != shape {
            return Err(NetError::Tape("output weight shape"));
        }
        if !tape.second_order && gd2.data().iter().any(|&v| v != 0.0) {
            return Err(NetError::Tape("second-order weights on a first-order tape"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let (mut g0, mut g1, mut g2) = (gv.clone(), gd1.clone(), gd2.clone());
        for (l, (input, z)) in self.layers.iter().zip(tape.inputs.iter().zip(&tape.pre)).rev() {
            let len = z.v.data().len();
            let (rows, cols) = z.v.shape();
            let mut gz = Matrix::zeros(rows, cols);
            let mut gz1 = Matrix::zeros(rows, cols);
            let mut gz2 = Matrix::zeros(rows, cols);
            for k in 0..len {
                let (zv, z1, z2) = (z.v.data()[k], z.d1.data()[k], z.d2.data()[k]);
                let (_, s1, s2, s3) = l.act.derivatives(zv);
                let (a0, a1, a2) = (g0.data()[k], g1.data()[k], g2.data()[k]);
                gz.data_mut()[k] = a0 * s1 + a1 * s2 * z1 + a2 * (s3 * z1 * z1 + s2 * z2);
                gz1.data_mut()[k] = a1 * s1 + 2.0 * a2 * s2 * z1;
                gz2.data_mut()[k] = a2 * s1;
            }
            let mut w = matmul_tn(&gz, &input.v)?;
            w.axpy(1.0, &matmul_tn(&gz1, &input.d1)?)?;
            w.axpy(1.0, &matmul_tn(&gz2, &input.d2)?)?;
            let b = l.b.as_ref().map(|_| column_sums(&gz));
            g0 = matmul(&gz, &l.w)?;
            g1 = matmul(&gz1, &l.w)?;
            g2 = matmul(&gz2, &l.w)?;
            grads.push(LayerGrads { w, b });
        }
        grads.reverse();
        Ok(FcnGrads { layers: grads })
    }
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: &[usize], act: Activation, seed: u64) -> Fcn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Fcn::he_normal(widths, act, true, &mut rng);
        // nonzero biases so the checks exercise them
        for l in &mut net.layers {
            if let Some(b) = &mut l.b {
                for v in b.iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        net
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn with_params(net: &Fcn, p: &[f64]) -> Fcn {
        let mut n = net.clone();
        n.read_params(p);
        n
    }

    #[test]
    fn swish_derivatives_match_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let (_, d1, d2, d3) = Activation::Swish.derivatives(x);
            let h = 1e-4;
            let f = |x: f64| Activation::Swish.derivatives(x);
            assert!((d1 - (f(x + h).0 - f(x - h).0) / (2.0 * h)).abs() < 1e-7);
            assert!((d2 - (f(x + h).1 - f(x - h).1) / (2.0 * h)).abs() < 1e-7);
            assert!((d3 - (f(x + h).2 - f(x - h).2) / (2.0 * h)).abs() < 1e-7);
            let (_, t1, t2, t3) = Activation::Tanh.derivatives(x);
            let g = |x: f64| Activation::Tanh.derivatives(x);
            assert!((t1 - (g(x + h).0 - g(x - h).0) / (2.0 * h)).abs() < 1e-7);
            assert!((t2 - (g(x + h).1 - g(x - h).1) / (2.0 * h)).abs() < 1e-7);
            assert!((t3 - (g(x + h).2 - g(x - h).2) / (2.0 * h)).abs() < 1e-7);
        }
        assert_eq!(Activation::Swish.derivatives(0.0).1, 0.5);
    }

    #[test]
    fn constant_jet_stays_constant() {
        let j = Activation::Swish.jet(Jet2::constant(0.3));
        assert_eq!((j.d1, j.d2), (0.0, 0.0));
    }

    #[test]
    fn he_normal_statistics_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = he_normal_init(1000, 100, 2, &mut rng);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.95..=1.05).contains(&var), "variance {var}");

        let a = Fcn::he_normal(&[3, 4, 2], Activation::Swish, true, &mut ChaCha8Rng::seed_from_u64(5));
        let b = Fcn::he_normal(&[3, 4, 2], Activation::Swish, true, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.b.as_ref().unwrap().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_network_and_swish_zero() {
        let net = Fcn {
            layers: vec![DenseLayer {
                w: Matrix::identity(3),
                b: Some(vec![0.0; 3]),
                act: Activation::Identity,
            }],
        };
        assert_eq!(net.forward_vec(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);

        let one = Fcn {
            layers: vec![DenseLayer {
                w: Matrix::identity(1),
                b: Some(vec![0.0]),
                act: Activation::Swish,
            }],
        };
        assert_eq!(one.forward_vec(&[0.0]).unwrap(), vec![0.0]);
        let (jets, _) = one.jet_forward(&Matrix::zeros(1, 1), 0, true).unwrap();
        assert_eq!(jets.d1.get(0, 0), 0.5);

        let (jets, _) = net.jet_forward(&Matrix::from_rows(&[&[0.2, 0.4, 0.6]]), 1, true).unwrap();
        assert_eq!(jets.get(0, 1), Jet2 { v: 0.4, d1: 1.0, d2: 0.0 });
        assert_eq!(jets.get(0, 0), Jet2 { v: 0.2, d1: 0.0, d2: 0.0 });
    }

    #[test]
    fn forward_rejects_bad_width() {
        let net = random_net(&[3, 4, 2], Activation::Swish, 1);
        assert!(matches!(net.forward(&Matrix::zeros(2, 4)), Err(NetError::Shape { .. })));
        assert!(matches!(
            net.jet_forward(&Matrix::zeros(2, 3), 3, true),
            Err(NetError::Direction { .. })
        ));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let w = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25], &[1.0, 1.0]]);
        let net = Fcn {
            layers: vec![DenseLayer { w, b: None, act: Activation::Identity }],
        };
        let x = Matrix::from_rows(&[&[3.0, -2.0]]);
        let g = Matrix::from_rows(&[&[1.0, 2.0, -1.0]]);
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &g).unwrap();
        assert_eq!(grads.layers[0].w, matmul_tn(&g, &x).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let net = random_net(&[3, 8, 6, 4], Activation::Swish, seed);
            let x = random_input(5, 3, 100 + seed);
            let g = random_input(5, 4, 200 + seed);
            let (_, tape) = net.forward(&x).unwrap();
            let (grads, gin) = net.backward(&tape, &g).unwrap();
            let mut p = Vec::new();
            net.write_params(&mut p);
            let objective = |q: &[f64]| {
                let (out, _) = with_params(&net, q).forward(&x).unwrap();
                crate::linalg::dot(out.data(), g.data())
            };
            let fd = central_difference(&objective, &p, 1e-5);
            let err = max_relative_error(&grads.flatten(), &fd);
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");

            let fd_in = central_difference(
                &|xi: &[f64]| {
                    let (out, _) = net.forward(&Matrix::new(5, 3, xi.to_vec()).unwrap()).unwrap();
                    crate::linalg::dot(out.data(), g.data())
                },
                x.data(),
                1e-5,
            );
            assert!(max_relative_error(gin.data(), &fd_in) <= 1e-5);
        }
    }

    #[test]
    fn zero_out_grad_gives_zero_grads() {
        let net = random_net(&[2, 5, 3], Activation::Tanh, 3);
        let x = random_input(4, 2, 9);
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, gin) = net.backward(&tape, &Matrix::zeros(4, 3)).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.data().iter().all(|&v| v == 0.0));
        let (_, jt) = net.jet_forward(&x, 0, true).unwrap();
        let z = Matrix::zeros(4, 3);
        let jg = net.jet_backward(&jt, &z, &z, &z).unwrap();
        assert!(jg.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jets_match_finite_differences_of_forward() {
        for seed in 0..5 {
            let net = random_net(&[2, 8, 8, 3], Activation::Swish, 40 + seed);
            let x = random_input(6, 2, 50 + seed);
            for dir in 0..2 {
                let (jets, _) = net.jet_forward(&x, dir, true).unwrap();
                let h = 1e-4;
                let shifted = |s: f64| {
                    let mut xs = x.clone();
                    for n in 0..x.rows() {
                        let v = xs.get(n, dir);
                        xs.set(n, dir, v + s);
                    }
                    net.forward(&xs).unwrap().0
                };
                let (fp, f0, fm) = (shifted(h), shifted(0.0), shifted(-h));
                assert_eq!(jets.v, f0);
                let d1 = Matrix::from_fn(6, 3, |n, i| (fp.get(n, i) - fm.get(n, i)) / (2.0 * h));
                let d2 = Matrix::from_fn(6, 3, |n, i| {
                    (fp.get(n, i) - 2.0 * f0.get(n, i) + fm.get(n, i)) / (h * h)
                });
                assert!(max_relative_error(jets.d1.data(), d1.data()) <= 1e-4);
                assert!(max_relative_error(jets.d2.data(), d2.data()) <= 1e-4);
            }
        }
    }

    #[test]
    fn affine_jets_have_zero_curvature() {
        let mut net = random_net(&[2, 4, 3], Activation::Identity, 8);
        net.layers[1].act = Activation::Identity;
        let (jets, _) = net.jet_forward(&random_input(5, 2, 1), 0, true).unwrap();
        assert!(jets.d2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_sum_of_squares() {
        // identity net followed by f(x, y) = x² + y² assembled from the jets
        let net = Fcn {
            layers: vec![DenseLayer {
                w: Matrix::identity(2),
                b: None,
                act: Activation::Identity,
            }],
        };
        let x = Matrix::from_rows(&[&[0.3, -1.2]]);
        let mut lap = 0.0;
        for dir in 0..2 {
            let (jets, _) = net.jet_forward(&x, dir, true).unwrap();
            for i in 0..2 {
                let j = jets.get(0, i);
                // (u²)'' = 2 u'² + 2 u u''
                lap += 2.0 * j.d1 * j.d1 + 2.0 * j.v * j.d2;
            }
        }
        assert_eq!(lap, 4.0);
    }

    #[test]
    fn relu_rejected_for_second_order() {
        let net = random_net(&[2, 3], Activation::Relu, 2);
        assert!(matches!(
            net.jet_forward(&Matrix::zeros(1, 2), 0, true),
            Err(NetError::NonSmooth(Activation::Relu))
        ));
        assert!(net.jet_forward(&Matrix::zeros(1, 2), 0, false).is_ok());
    }

    #[test]
    fn jet_backward_value_only_matches_backward() {
        let net = random_net(&[2, 6, 4], Activation::Swish, 12);
        let x = random_input(3, 2, 13);
        let g = random_input(3, 4, 14);
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &g).unwrap();
        let (_, jt) = net.jet_forward(&x, 1, true).unwrap();
        let z = Matrix::zeros(3, 4);
        let jg = net.jet_backward(&jt, &g, &z, &z).unwrap();
        let err = max_relative_error(&grads.flatten(), &jg.flatten());
        assert!(err <= 1e-14, "{err}");
    }

    #[test]
    fn jet_backward_matches_finite_differences() {
        for seed in 0..5 {
            let net = random_net(&[2, 7, 5], Activation::Tanh, 60 + seed);
            let x = random_input(4, 2, 70 + seed);
            let (a, b, c) = (
                random_input(4, 5, 80 + seed),
                random_input(4, 5, 90 + seed),
                random_input(4, 5, 95 + seed),
            );
            let dir = (seed % 2) as usize;
            let (_, jt) = net.jet_forward(&x, dir, true).unwrap();
            let jg = net.jet_backward(&jt, &a, &b, &c).unwrap();
            let mut p = Vec::new();
            net.write_params(&mut p);
            let objective = |q: &[f64]| {
                let (j, _) = with_params(&net, q).jet_forward(&x, dir, true).unwrap();
                crate::linalg::dot(j.v.data(), a.data())
                    + crate::linalg::dot(j.d1.data(), b.data())
                    + crate::linalg::dot(j.d2.data(), c.data())
            };
            let fd = central_difference(&objective, &p, 1e-5);
            let err = max_relative_error(&jg.flatten(), &fd);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn jet_backward_rejects_mismatched_tape() {
        let net = random_net(&[2, 3, 2], Activation::Swish, 1);
        let (_, jt) = net.jet_forward(&Matrix::zeros(2, 2), 0, false).unwrap();
        let z = Matrix::zeros(2, 2);
        let one = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert!(net.jet_backward(&jt, &z, &z, &one).is_err());
        assert!(net.jet_backward(&jt, &Matrix::zeros(3, 2), &z, &z).is_err());
    }
}
