//! DeepONet model `G(u)(y) ≈ Σ_i (Σ_j c_ij b̃_j(u)) t_i(y)` and its composite
//! squared-error loss over linear trunk operators.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matmul, matmul_nt, matmul_tn, LinalgError, Matrix};
use crate::nets::{Activation, Cnn, CnnGrads, CnnTape, ConvLayer, Fcn, FcnGrads, FcnTape, ImageShape, JetTape, NetError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss needs at least one term")]
    NoTerms,
    #[error("invalid operator: {0}")]
    Operator(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `L = c0·id + Σ_d c1[d]·∂_d + Σ_d c2[d]·∂²_d` on trunk outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkOperator {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl TrunkOperator {
    pub fn identity(dim: usize) -> Self {
        TrunkOperator {
            c0: 1.0,
            c1: vec![0.0; dim],
            c2: vec![0.0; dim],
        }
    }

    /// `Σ_d coef[d]·∂_d`
    pub fn first_order(coef: &[f64]) -> Self {
        TrunkOperator {
            c0: 0.0,
            c1: coef.to_vec(),
            c2: vec![0.0; coef.len()],
        }
    }

    /// `−Δ` in `dim` dimensions.
    pub fn neg_laplacian(dim: usize) -> Self {
        TrunkOperator {
            c0: 0.0,
            c1: vec![0.0; dim],
            c2: vec![-1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.c1.len()
    }

    pub fn is_identity(&self) -> bool {
        self.c0 == 1.0 && self.c1.iter().chain(&self.c2).all(|&c| c == 0.0)
    }

    pub fn has_derivatives(&self) -> bool {
        self.c1.iter().chain(&self.c2).any(|&c| c != 0.0)
    }

    pub fn add(&self, other: &TrunkOperator) -> Result<TrunkOperator> {
        self.check(other.dim())?;
        other.check(self.dim())?;
        Ok(TrunkOperator {
            c0: self.c0 + other.c0,
            c1: self.c1.iter().zip(&other.c1).map(|(a, b)| a + b).collect(),
            c2: self.c2.iter().zip(&other.c2).map(|(a, b)| a + b).collect(),
        })
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.c1.len() != dim || self.c2.len() != dim {
            return Err(ModelError::Operator(format!(
                "coefficient lengths ({}, {}) do not match trunk input dimension {dim}",
                self.c1.len(),
                self.c2.len()
            )));
        }
        let all = std::iter::once(&self.c0).chain(&self.c1).chain(&self.c2);
        if all.clone().any(|c| !c.is_finite()) {
            return Err(ModelError::Operator("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// One weighted squared-error term: `ε·mean((F − B Cᵀ Tᵀ)²)` where `T` is
/// the operator applied to the trunk on the points `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub op: TrunkOperator,
    /// `Q × d` trunk points.
    pub tau: Matrix,
    /// `P × Q` targets, one row per input function.
    pub target: Matrix,
}

impl LossTerm {
    pub fn select(&self, rows: &[usize]) -> LossTerm {
        LossTerm {
            name: self.name.clone(),
            weight: self.weight,
            op: self.op.clone(),
            tau: self.tau.clone(),
            target: self.target.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Flattened branch input length, or the image it came from.
    pub branch_input: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_image: Option<ImageShape>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conv: Vec<ConvSpec>,
    /// Hidden widths of the branch FCN; the last one is `J`.
    pub branch_widths: Vec<usize>,
    pub trunk_input: usize,
    /// Widths of the trunk FCN; the last one is `I`.
    pub trunk_widths: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetModel {
    pub branch_conv: Option<Cnn>,
    pub branch_fcn: Fcn,
    /// `I × J`, no bias.
    pub c: Matrix,
    pub trunk: Fcn,
}

#[derive(Debug, Clone)]
pub struct BranchTape {
    conv: Option<CnnTape>,
    fcn: FcnTape,
}

#[derive(Debug, Clone)]
pub struct TrunkTape {
    plain: Option<FcnTape>,
    jets: Vec<(usize, JetTape)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Option<CnnGrads>,
    pub branch: FcnGrads,
    pub trunk: FcnGrads,
    pub c: Matrix,
}

impl ModelGrads {
    /// Same order as [`DeepONetModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(c) = &self.conv {
            c.write_flat(&mut v);
        }
        self.branch.write_flat(&mut v);
        self.trunk.write_flat(&mut v);
        v.extend_from_slice(self.c.data());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Unweighted mean squared error of each term.
    pub term_mse: Vec<f64>,
    /// `λ‖C‖_F²`
    pub regularization: f64,
    pub total: f64,
}

impl DeepONetModel {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let act = arch.activation;
        let (branch_conv, fcn_in) = match arch.branch_image {
            Some(shape) => {
                if shape.len() != arch.branch_input {
                    return Err(ModelError::Shape(format!(
                        "branch image {}x{}x{} does not flatten to {}",
                        shape.channels, shape.height, shape.width, arch.branch_input
                    )));
                }
                let mut in_ch = shape.channels;
                let mut layers = Vec::with_capacity(arch.conv.len());
                for s in &arch.conv {
                    layers.push(ConvLayer::he_normal(
                        in_ch,
                        s.channels,
                        (s.kernel[0], s.kernel[1]),
                        (s.stride[0], s.stride[1]),
                        act,
                        true,
                        rng,
                    ));
                    in_ch = s.channels;
                }
                let cnn = Cnn { input: shape, layers };
                let flat = cnn.output_len()?;
                (Some(cnn), flat)
            }
            None if !arch.conv.is_empty() => {
                return Err(ModelError::Shape("convolution layers need a branch image shape".into()));
            }
            None => (None, arch.branch_input),
        };
        if arch.branch_widths.is_empty() || arch.trunk_widths.is_empty() {
            return Err(ModelError::Shape("branch and trunk need at least one layer".into()));
        }
        let mut bw = vec![fcn_in];
        bw.extend_from_slice(&arch.branch_widths);
        let branch_fcn = Fcn::he_normal(&bw, act, true, rng);
        let mut tw = vec![arch.trunk_input];
        tw.extend_from_slice(&arch.trunk_widths);
        let trunk = Fcn::he_normal(&tw, act, true, rng);
        let (i, j) = (trunk.output_dim(), branch_fcn.output_dim());
        let c = crate::nets::he_normal_init(i, j, j, rng);
        Ok(DeepONetModel {
            branch_conv,
            branch_fcn,
            c,
            trunk,
        })
    }

    /// `(I, J)`
    pub fn basis_dims(&self) -> (usize, usize) {
        self.c.shape()
    }

    pub fn branch_input_len(&self) -> usize {
        match &self.branch_conv {
            Some(cnn) => cnn.input.len(),
            None => self.branch_fcn.input_dim(),
        }
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.num_hidden_params() + self.c.data().len()
    }

    pub fn num_hidden_params(&self) -> usize {
        self.branch_conv.as_ref().map_or(0, |c| c.num_params()) + self.branch_fcn.num_params() + self.trunk.num_params()
    }

    /// Conv kernels/biases, branch FCN, trunk FCN, then `C` row by row.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        if let Some(c) = &self.branch_conv {
            c.write_params(&mut v);
        }
        self.branch_fcn.write_params(&mut v);
        self.trunk.write_params(&mut v);
        v.extend_from_slice(self.c.data());
        v
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(ModelError::Shape(format!(
                "parameter vector has {} entries, model has {}",
                src.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        if let Some(c) = &mut self.branch_conv {
            k += c.read_params(&src[k..]);
        }
        k += self.branch_fcn.read_params(&src[k..]);
        k += self.trunk.read_params(&src[k..]);
        self.c.data_mut().copy_from_slice(&src[k..]);
        Ok(())
    }

    fn check_c(&self) -> Result<()> {
        let (i, j) = self.c.shape();
        if i != self.trunk.output_dim() || j != self.branch_fcn.output_dim() {
            return Err(ModelError::Shape(format!(
                "C is {i}x{j} but trunk width is {} and branch width is {}",
                self.trunk.output_dim(),
                self.branch_fcn.output_dim()
            )));
        }
        Ok(())
    }

    pub fn branch_forward(&self, inputs: &Matrix) -> Result<(Matrix, BranchTape)> {
        if inputs.cols() != self.branch_input_len() {
            return Err(ModelError::Shape(format!(
                "branch input has {} columns, expected {}",
                inputs.cols(),
                self.branch_input_len()
            )));
        }
        let (conv, feats) = match &self.branch_conv {
            Some(cnn) => {
                let (f, t) = cnn.forward(inputs)?;
                (Some(t), f)
            }
            None => (None, inputs.clone()),
        };
        let (b, fcn) = self.branch_fcn.forward(&feats)?;
        Ok((b, BranchTape { conv, fcn }))
    }

    /// `B`, one row `b̃(u_p)` per input function.
    pub fn branch_pre_output(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.branch_forward(inputs)?.0)
    }

    pub fn branch_backward(&self, tape: &BranchTape, grad_b: &Matrix) -> Result<(Option<CnnGrads>, FcnGrads)> {
        let (fg, gin) = self.branch_fcn.backward(&tape.fcn, grad_b)?;
        let cg = match (&self.branch_conv, &tape.conv) {
            (Some(cnn), Some(t)) => Some(cnn.backward(t, &gin)?.0),
            (None, None) => None,
            _ => return Err(NetError::Tape("branch convolution mismatch").into()),
        };
        Ok((cg, fg))
    }

    pub fn trunk_operator_forward(&self, op: &TrunkOperator, tau: &Matrix) -> Result<(Matrix, TrunkTape)> {
        let dim = self.trunk_input_dim();
        op.check(dim)?;
        if tau.cols() != dim {
            return Err(ModelError::Shape(format!("trunk points have {} coordinates, expected {dim}", tau.cols())));
        }
        let mut t = Matrix::zeros(tau.rows(), self.trunk.output_dim());
        let mut plain = None;
        if op.c0 != 0.0 {
            let (v, tape) = self.trunk.forward(tau)?;
            t.axpy(op.c0, &v)?;
            plain = Some(tape);
        }
        let mut jets = Vec::new();
        for d in 0..dim {
            let (a1, a2) = (op.c1[d], op.c2[d]);
            if a1 == 0.0 && a2 == 0.0 {
                continue;
            }
            let (jb, tape) = self.trunk.jet_forward(tau, d, a2 != 0.0)?;
            if a1 != 0.0 {
                t.axpy(a1, &jb.d1)?;
            }
            if a2 != 0.0 {
                t.axpy(a2, &jb.d2)?;
            }
            jets.push((d, tape));
        }
        Ok((t, TrunkTape { plain, jets }))
    }

    /// `T`, entry `(q, i) = L[t_i](y_q)`.
    pub fn trunk_operator_output(&self, op: &TrunkOperator, tau: &Matrix) -> Result<Matrix> {
        Ok(self.trunk_operator_forward(op, tau)?.0)
    }

    pub fn trunk_operator_backward(&self, op: &TrunkOperator, tape: &TrunkTape, grad_t: &Matrix) -> Result<FcnGrads> {
        let mut g = FcnGrads::zeros_like(&self.trunk);
        if let Some(p) = &tape.plain {
            g.add_assign(&self.trunk.backward(p, &grad_t.scale(op.c0))?.0);
        }
        let zero = Matrix::zeros(grad_t.rows(), grad_t.cols());
        for (d, jt) in &tape.jets {
            let g1 = grad_t.scale(op.c1[*d]);
            let g2 = grad_t.scale(op.c2[*d]);
            g.add_assign(&self.trunk.jet_backward(jt, &zero, &g1, &g2)?);
        }
        Ok(g)
    }

    /// `P × Q` predictions `B Cᵀ Tᵀ`.
    pub fn evaluate(&self, inputs: &Matrix, tau: &Matrix) -> Result<Matrix> {
        self.check_c()?;
        let b = self.branch_pre_output(inputs)?;
        let (t, _) = self.trunk.forward(tau)?;
        Ok(matmul_nt(&matmul_nt(&b, &self.c)?, &t)?)
    }

    pub fn loss(&self, inputs: &Matrix, terms: &[LossTerm], lambda: f64) -> Result<LossBreakdown> {
        self.check_c()?;
        check_terms(inputs, terms)?;
        let b = self.branch_pre_output(inputs)?;
        let h = matmul_nt(&b, &self.c)?;
        let mut term_mse = Vec::with_capacity(terms.len());
        for term in terms {
            let t = self.trunk_operator_output(&term.op, &term.tau)?;
            let r = matmul_nt(&h, &t)?.sub(&term.target)?;
            term_mse.push(mean_sq(&r));
        }
        Ok(combine(terms, term_mse, lambda * self.c.frobenius_sq()))
    }

    /// Loss and exact gradients with respect to every parameter, `C` included.
    pub fn loss_gradients(&self, inputs: &Matrix, terms: &[LossTerm], lambda: f64) -> Result<(LossBreakdown, ModelGrads)> {
        self.check_c()?;
        check_terms(inputs, terms)?;
        let (b, btape) = self.branch_forward(inputs)?;
        let h = matmul_nt(&b, &self.c)?;
        let mut grad_h = Matrix::zeros(h.rows(), h.cols());
        let mut trunk = FcnGrads::zeros_like(&self.trunk);
        let mut term_mse = Vec::with_capacity(terms.len());
        for term in terms {
            let (t, ttape) = self.trunk_operator_forward(&term.op, &term.tau)?;
            let r = matmul_nt(&h, &t)?.sub(&term.target)?;
            term_mse.push(mean_sq(&r));
            let w = 2.0 * term.weight / r.data().len() as f64;
            grad_h.axpy(w, &matmul(&r, &t)?)?;
            let grad_t = matmul_tn(&r, &h)?.scale(w);
            trunk.add_assign(&self.trunk_operator_backward(&term.op, &ttape, &grad_t)?);
        }
        let mut grad_c = matmul_tn(&grad_h, &b)?;
        grad_c.axpy(2.0 * lambda, &self.c)?;
        let grad_b = matmul(&grad_h, &self.c)?;
        let (conv, branch) = self.branch_backward(&btape, &grad_b)?;
        let breakdown = combine(terms, term_mse, lambda * self.c.frobenius_sq());
        Ok((
            breakdown,
            ModelGrads {
                conv,
                branch,
                trunk,
                c: grad_c,
            },
        ))
    }
}

fn check_terms(inputs: &Matrix, terms: &[LossTerm]) -> Result<()> {
    if terms.is_empty() {
        return Err(ModelError::NoTerms);
    }
    for t in terms {
        if t.target.rows() != inputs.rows() || t.target.cols() != t.tau.rows() {
            return Err(ModelError::Shape(format!(
                "term {}: target is {}x{}, expected {}x{}",
                t.name,
                t.target.rows(),
                t.target.cols(),
                inputs.rows(),
                t.tau.rows()
            )));
        }
    }
    Ok(())
}

fn mean_sq(r: &Matrix) -> f64 {
    if r.data().is_empty() {
        0.0
    } else {
        r.frobenius_sq() / r.data().len() as f64
    }
}

fn combine(terms: &[LossTerm], term_mse: Vec<f64>, regularization: f64) -> LossBreakdown {
    let data: f64 = terms.iter().zip(&term_mse).map(|(t, m)| t.weight * m).sum();
    LossBreakdown {
        term_mse,
        regularization,
        total: data + regularization,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::nets::DenseLayer;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(branch_input: usize, trunk_input: usize, width: usize, act: Activation) -> Architecture {
        Architecture {
            branch_input,
            branch_image: None,
            conv: vec![],
            branch_widths: vec![width, width],
            trunk_input,
            trunk_widths: vec![width, width],
            activation: act,
        }
    }

    fn random_model(seed: u64, width: usize, act: Activation) -> DeepONetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DeepONetModel::new(&arch(5, 2, width, act), &mut rng).unwrap();
        let mut p = m.params();
        for v in &mut p {
            *v += rng.random_range(-0.2..0.2);
        }
        m.set_params(&p).unwrap();
        m
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn identity_layer(n: usize) -> DenseLayer {
        DenseLayer {
            w: Matrix::identity(n),
            b: None,
            act: Activation::Identity,
        }
    }

    fn scalar_model(c: f64) -> DeepONetModel {
        DeepONetModel {
            branch_conv: None,
            branch_fcn: Fcn { layers: vec![identity_layer(1)] },
            c: Matrix::from_rows(&[&[c]]),
            trunk: Fcn { layers: vec![identity_layer(1)] },
        }
    }

    fn advection_terms(p: usize, rng: &mut ChaCha8Rng) -> Vec<LossTerm> {
        let bc = Matrix::from_fn(6, 2, |q, _| q as f64 / 5.0);
        let interior = random_matrix(7, 2, rng).map(|v| 0.5 + 0.4 * v);
        vec![
            LossTerm {
                name: "data".into(),
                weight: 1.0,
                op: TrunkOperator::identity(2),
                tau: bc,
                target: random_matrix(p, 6, rng),
            },
            LossTerm {
                name: "physics".into(),
                weight: 0.1,
                op: TrunkOperator::first_order(&[0.5, 1.0]),
                tau: interior,
                target: Matrix::zeros(p, 7),
            },
        ]
    }

    #[test]
    fn identity_branch_returns_inputs() {
        let m = DeepONetModel {
            branch_conv: None,
            branch_fcn: Fcn { layers: vec![identity_layer(3)] },
            c: Matrix::zeros(1, 3),
            trunk: Fcn { layers: vec![identity_layer(1)] },
        };
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(m.branch_pre_output(&x).unwrap(), x);
        assert!(m.branch_pre_output(&Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn batched_branch_rows_match_single_samples() {
        let m = random_model(0, 6, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(4, 5, &mut rng);
        let b = m.branch_pre_output(&x).unwrap();
        for p in 0..4 {
            assert_eq!(b.row(p), m.branch_fcn.forward_vec(x.row(p)).unwrap().as_slice());
        }
        assert!(b.is_finite());
    }

    #[test]
    fn time_derivative_operator_matches_finite_differences() {
        let m = random_model(2, 6, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau = random_matrix(5, 2, &mut rng);
        let dt = m.trunk_operator_output(&TrunkOperator::first_order(&[0.0, 1.0]), &tau).unwrap();
        let h = 1e-5;
        let shift = |s: f64| Matrix::from_fn(5, 2, |q, d| tau.get(q, d) + if d == 1 { s } else { 0.0 });
        let id = TrunkOperator::identity(2);
        let fd = m
            .trunk_operator_output(&id, &shift(h))
            .unwrap()
            .sub(&m.trunk_operator_output(&id, &shift(-h)).unwrap())
            .unwrap()
            .scale(0.5 / h);
        assert!(max_relative_error(dt.data(), fd.data()) <= 1e-4);
    }

    #[test]
    fn identity_operator_gives_plain_trunk() {
        let m = random_model(4, 5, Activation::Tanh);
        let tau = Matrix::from_fn(3, 2, |q, d| (q + d) as f64 * 0.1);
        let t = m.trunk_operator_output(&TrunkOperator::identity(2), &tau).unwrap();
        assert_eq!(t, m.trunk.forward(&tau).unwrap().0);
    }

    #[test]
    fn operator_output_is_additive() {
        let m = random_model(5, 5, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tau = random_matrix(4, 2, &mut rng);
        let a = TrunkOperator::first_order(&[0.5, 1.0]);
        let b = TrunkOperator {
            c0: 0.3,
            c1: vec![0.0, -2.0],
            c2: vec![-1.0, -1.0],
        };
        let sum = m.trunk_operator_output(&a.add(&b).unwrap(), &tau).unwrap();
        let parts = m
            .trunk_operator_output(&a, &tau)
            .unwrap()
            .add(&m.trunk_operator_output(&b, &tau).unwrap())
            .unwrap();
        assert!(sum.max_abs_diff(&parts).unwrap() <= 1e-12);
    }

    #[test]
    fn curvature_operator_rejects_relu() {
        let m = random_model(7, 4, Activation::Relu);
        let tau = Matrix::zeros(2, 2);
        assert!(m.trunk_operator_output(&TrunkOperator::neg_laplacian(2), &tau).is_err());
        assert!(m.trunk_operator_output(&TrunkOperator::identity(3), &tau).is_err());
    }

    #[test]
    fn scalar_prediction_is_twice_product() {
        let m = scalar_model(2.0);
        let pred = m.evaluate(&Matrix::column(&[1.5, -0.5]), &Matrix::column(&[3.0])).unwrap();
        assert_eq!(pred.data(), &[9.0, -3.0]);
    }

    #[test]
    fn zero_c_predicts_zero() {
        let mut m = random_model(8, 4, Activation::Swish);
        m.c = Matrix::zeros(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = m.evaluate(&random_matrix(3, 5, &mut rng), &random_matrix(6, 2, &mut rng)).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluate_matches_double_sum() {
        for seed in 0..5 {
            let m = random_model(seed, 4, Activation::Swish);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let u = random_matrix(3, 5, &mut rng);
            let y = random_matrix(4, 2, &mut rng);
            let pred = m.evaluate(&u, &y).unwrap();
            for p in 0..3 {
                let b = m.branch_fcn.forward_vec(u.row(p)).unwrap();
                for q in 0..4 {
                    let t = m.trunk.forward_vec(y.row(q)).unwrap();
                    let mut s = 0.0;
                    for (i, ti) in t.iter().enumerate() {
                        let mut inner = 0.0;
                        for (j, bj) in b.iter().enumerate() {
                            inner += m.c.get(i, j) * bj;
                        }
                        s += inner * ti;
                    }
                    assert!((pred.get(p, q) - s).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_hand_values() {
        let m = random_model(10, 3, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_matrix(3, 5, &mut rng);
        let tau = random_matrix(4, 2, &mut rng);
        let perfect = LossTerm {
            name: "d".into(),
            weight: 1.0,
            op: TrunkOperator::identity(2),
            tau: tau.clone(),
            target: m.evaluate(&u, &tau).unwrap(),
        };
        assert_eq!(m.loss(&u, &[perfect], 0.0).unwrap().total, 0.0);

        let mut zero = m.clone();
        zero.c = Matrix::zeros(3, 3);
        let ones = LossTerm {
            name: "d".into(),
            weight: 1.0,
            op: TrunkOperator::identity(2),
            tau: tau.clone(),
            target: Matrix::from_fn(3, 4, |_, _| 1.0),
        };
        assert_eq!(zero.loss(&u, &[ones], 0.0).unwrap().total, 1.0);

        let s = scalar_model(3.0);
        let data = LossTerm {
            name: "d".into(),
            weight: 1.0,
            op: TrunkOperator::identity(1),
            tau: Matrix::column(&[0.0]),
            target: Matrix::zeros(1, 1),
        };
        assert_eq!(s.loss(&Matrix::column(&[0.0]), &[data], 2.0).unwrap().total, 18.0);
        assert!(matches!(s.loss(&Matrix::column(&[0.0]), &[], 0.0), Err(ModelError::NoTerms)));
    }

    fn check_gradients(m: &DeepONetModel, u: &Matrix, terms: &[LossTerm], lambda: f64) -> f64 {
        let (_, g) = m.loss_gradients(u, terms, lambda).unwrap();
        let p = m.params();
        let f = |q: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(q).unwrap();
            mm.loss(u, terms, lambda).unwrap().total
        };
        let fd = central_difference(&f, &p, 1e-5);
        max_relative_error(&g.flatten(), &fd)
    }

    #[test]
    fn advection_pi_gradients_match_finite_differences() {
        for seed in 0..5 {
            let m = random_model(20 + seed, 5, Activation::Swish);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let u = random_matrix(4, 5, &mut rng);
            let terms = advection_terms(4, &mut rng);
            let err = check_gradients(&m, &u, &terms, 1e-3);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn laplacian_term_gradients_match_finite_differences() {
        let m = random_model(30, 4, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = random_matrix(3, 5, &mut rng);
        let terms = vec![LossTerm {
            name: "physics".into(),
            weight: 1.0,
            op: TrunkOperator::neg_laplacian(2),
            tau: random_matrix(5, 2, &mut rng),
            target: random_matrix(3, 5, &mut rng),
        }];
        assert!(check_gradients(&m, &u, &terms, 0.0) <= 1e-4);
    }

    #[test]
    fn cnn_branch_gradients_match_finite_differences() {
        let a = Architecture {
            branch_input: 36,
            branch_image: Some(ImageShape {
                channels: 1,
                height: 6,
                width: 6,
            }),
            conv: vec![
                ConvSpec {
                    channels: 2,
                    kernel: [2, 2],
                    stride: [2, 2],
                },
                ConvSpec {
                    channels: 3,
                    kernel: [2, 2],
                    stride: [1, 1],
                },
            ],
            branch_widths: vec![4],
            trunk_input: 2,
            trunk_widths: vec![4, 4],
            activation: Activation::Swish,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let m = DeepONetModel::new(&a, &mut rng).unwrap();
        let u = random_matrix(2, 36, &mut rng);
        let terms = advection_terms(2, &mut rng);
        assert!(check_gradients(&m, &u, &terms, 1e-2) <= 1e-4);
    }

    #[test]
    fn zero_residual_has_zero_gradients() {
        let m = random_model(70, 4, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let u = random_matrix(3, 5, &mut rng);
        let mut terms = advection_terms(3, &mut rng);
        for t in &mut terms {
            let b = m.branch_pre_output(&u).unwrap();
            let tt = m.trunk_operator_output(&t.op, &t.tau).unwrap();
            t.target = matmul_nt(&matmul_nt(&b, &m.c).unwrap(), &tt).unwrap();
        }
        let (l, g) = m.loss_gradients(&u, &terms, 0.0).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_term_is_supervised_mse() {
        let m = random_model(80, 4, Activation::Swish);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let u = random_matrix(3, 5, &mut rng);
        let tau = random_matrix(6, 2, &mut rng);
        let target = random_matrix(3, 6, &mut rng);
        let terms = vec![LossTerm {
            name: "data".into(),
            weight: 1.0,
            op: TrunkOperator::identity(2),
            tau: tau.clone(),
            target: target.clone(),
        }];
        let mse = |mm: &DeepONetModel| {
            let r = mm.evaluate(&u, &tau).unwrap().sub(&target).unwrap();
            r.frobenius_sq() / 18.0
        };
        let loss = m.loss(&u, &terms, 0.0).unwrap().total;
        assert!((loss - mse(&m)).abs() <= 1e-14);
        let (_, g) = m.loss_gradients(&u, &terms, 0.0).unwrap();
        let fd = central_difference(
            &|q: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(q).unwrap();
                mse(&mm)
            },
            &m.params(),
            1e-5,
        );
        assert!(max_relative_error(&g.flatten(), &fd) <= 1e-5);
    }

    #[test]
    fn params_round_trip() {
        let m = random_model(90, 3, Activation::Swish);
        let mut other = random_model(91, 3, Activation::Swish);
        other.set_params(&m.params()).unwrap();
        assert_eq!(other, m);
        assert!(other.set_params(&[0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_is_linear_in_c(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(seed, 3, Activation::Swish);
            let u = random_matrix(2, 5, &mut rng);
            let y = random_matrix(3, 2, &mut rng);
            let c1 = random_matrix(3, 3, &mut rng);
            let c2 = random_matrix(3, 3, &mut rng);
            let with = |c: Matrix| {
                let mut mm = m.clone();
                mm.c = c;
                mm.evaluate(&u, &y).unwrap()
            };
            let mut mix = c1.scale(alpha);
            mix.axpy(beta, &c2).unwrap();
            let mut expected = with(c1).scale(alpha);
            expected.axpy(beta, &with(c2)).unwrap();
            prop_assert!(with(mix).max_abs_diff(&expected).unwrap() <= 1e-12);
        }
    }
}
