//! Least-squares solve for the last branch layer `C`.
//!
//! With `B` (P×J) the branch pre-outputs and `T_k` (Q_k×I) the operator
//! trunk outputs, the design matrix of term `k` factors as
//! `A_k = K_{P,Q_k} (T_k ⊗ B)`, so the normal equations collapse to
//! `BᵀB · Cᵀ · (Σ w_k T_kᵀT_k) + λ Cᵀ = Bᵀ (Σ w_k F_k T_k)`
//! with `w_k = ε_k / (P·Q_k)`.

use crate::deeponet::{DeepONetModel, LossTerm, ModelError, Result};
use crate::linalg::{commutation_matrix, kron, matmul, matmul_tn, solve_dense, solve_spsd_sylvester, Matrix};

/// Largest `P·Q·I·J` the dense oracle will build.
pub const ORACLE_MAX_ENTRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTerm {
    /// `ε_k / (P·Q_k)`
    pub weight: f64,
    pub t: Matrix,
    pub f: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub b: Matrix,
    pub terms: Vec<AssembledTerm>,
}

pub fn assemble(model: &DeepONetModel, inputs: &Matrix, terms: &[LossTerm]) -> Result<Assembled> {
    if terms.is_empty() {
        return Err(ModelError::NoTerms);
    }
    let b = model.branch_pre_output(inputs)?;
    let p = b.rows();
    let mut out = Vec::with_capacity(terms.len());
    for term in terms {
        let t = model.trunk_operator_output(&term.op, &term.tau)?;
        if term.target.shape() != (p, t.rows()) {
            return Err(ModelError::Shape(format!(
                "term {}: target is {}x{}, expected {p}x{}",
                term.name,
                term.target.rows(),
                term.target.cols(),
                t.rows()
            )));
        }
        out.push(AssembledTerm {
            weight: term.weight / (p * t.rows()).max(1) as f64,
            t,
            f: term.target.clone(),
        });
    }
    Ok(Assembled { b, terms: out })
}

/// Minimizer `C` (I×J) of `Σ w_k ‖F_k − B Cᵀ T_kᵀ‖_F² + λ‖C‖_F²`.
pub fn solve_last_layer(b: &Matrix, terms: &[AssembledTerm], lambda: f64) -> Result<Matrix> {
    let first = terms.first().ok_or(ModelError::NoTerms)?;
    let i = first.t.cols();
    let gram_b = matmul_tn(b, b)?;
    let mut gram_t = Matrix::zeros(i, i);
    let mut ft = Matrix::zeros(b.rows(), i);
    for term in terms {
        gram_t.axpy(term.weight, &matmul_tn(&term.t, &term.t)?)?;
        ft.axpy(term.weight, &matmul(&term.f, &term.t)?)?;
    }
    let e = matmul_tn(b, &ft)?;
    let x = solve_spsd_sylvester(&gram_b, &gram_t, &e, lambda)?;
    Ok(x.transpose())
}

/// Assembles on `inputs` and returns the optimal `C` for the current hidden parameters.
pub fn ls_update(model: &DeepONetModel, inputs: &Matrix, terms: &[LossTerm], lambda: f64) -> Result<Matrix> {
    let a = assemble(model, inputs, terms)?;
    solve_last_layer(&a.b, &a.terms, lambda)
}

fn check_oracle_size(b: &Matrix, t: &Matrix) -> Result<()> {
    let n = b.rows() * t.rows() * t.cols() * b.cols();
    if n > ORACLE_MAX_ENTRIES {
        return Err(ModelError::Shape(format!(
            "oracle matrix would have {n} entries (cap {ORACLE_MAX_ENTRIES})"
        )));
    }
    Ok(())
}

/// Dense `A_k`, built entrywise and as `K_{P,Q}(T ⊗ B)`; the two must agree exactly.
pub fn oracle_build_full_matrix(b: &Matrix, t: &Matrix) -> Result<Matrix> {
    check_oracle_size(b, t)?;
    let (p, j) = b.shape();
    let (q, i) = t.shape();
    let direct = Matrix::from_fn(p * q, i * j, |row, col| {
        let (pp, qq) = (row / q, row % q);
        let (ii, jj) = (col / j, col % j);
        b.get(pp, jj) * t.get(qq, ii)
    });
    let factored = matmul(&commutation_matrix(p, q), &kron(t, b))?;
    if direct != factored {
        return Err(ModelError::Shape("entrywise and factored design matrices differ".into()));
    }
    Ok(direct)
}

/// Solves the dense `IJ × IJ` normal system directly.
pub fn oracle_solve(b: &Matrix, terms: &[AssembledTerm], lambda: f64) -> Result<Matrix> {
    let first = terms.first().ok_or(ModelError::NoTerms)?;
    let (i, j) = (first.t.cols(), b.cols());
    let n = i * j;
    let mut normal = Matrix::identity(n).scale(lambda);
    let mut rhs = vec![0.0; n];
    for term in terms {
        let a = oracle_build_full_matrix(b, &term.t)?;
        normal.axpy(term.weight, &matmul_tn(&a, &a)?)?;
        let f = term.f.vec_rows();
        for (col, r) in rhs.iter_mut().enumerate() {
            let mut s = 0.0;
            for (row, fv) in f.iter().enumerate() {
                s += a.get(row, col) * fv;
            }
            *r += term.weight * s;
        }
    }
    let theta = solve_dense(&normal, &rhs)?;
    Ok(Matrix::new(i, j, theta)?)
}
