//! Frozen low-rank factorization of the prior-preconditioned forward map,
//! design-dependent spectral decompositions of the misfit Hessian, and a
//! randomized Nyström trace estimator.
//!
//! With `F̃ ≈ U_F V_F*` and `C_w = U_Fᵀ W_σ U_F`, Woodbury gives
//! `Γ_post ≈ Γ_pr − Γ_pr^{1/2} V_F X_w V_F* Γ_pr^{1/2}` where
//! `X_w = (C_w V_F*V_F + I)⁻¹ C_w`. Every design-dependent quantity below
//! therefore reduces to `k_f × k_f` algebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::bayes::{standard_normal, Design, InverseProblem, Prior};
use crate::config::SpectralMethod;
use crate::error::{invalid, numerical, Error, Result};
use crate::heat::TerminalMap;
use crate::linalg::{
    column_vector, from_columns, map_columns, sorted_eigen, trace_of_product, weighted_gram,
    CsrMatrix,
};

/// Linear goal operator on `R^N_M` with its M-weighted adjoint.
pub trait GoalOperator: Sync {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl GoalOperator for TerminalMap {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_a(v)
    }

    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_a_adjoint(v)
    }
}

/// The identity goal, which turns the goal-oriented criterion into the
/// classical A-criterion.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityGoal;

impl GoalOperator for IdentityGoal {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }

    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

/// Dense goal matrix acting on `R^N_M`; adjoint `M⁻¹ Aᵀ M`.
#[derive(Clone, Debug)]
pub struct DenseGoal {
    pub matrix: DMatrix<f64>,
    adjoint: DMatrix<f64>,
}

impl DenseGoal {
    pub fn new(matrix: DMatrix<f64>, mass: &CsrMatrix) -> Result<Self> {
        let m = mass.to_dense();
        let minv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| numerical("mass matrix is singular"))?;
        let adjoint = minv * matrix.transpose() * m;
        Ok(Self { matrix, adjoint })
    }
}

impl GoalOperator for DenseGoal {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.adjoint * v
    }
}

/// Design-independent truncated factorization `F̃ ≈ U_F V_F*` together with
/// the goal-operator images needed by the criteria.
///
/// The design-dependent algebra works in the M-orthonormal basis
/// `V̂ = V_F S⁻¹`, so the grams below are taken on `V̂` rather than `V_F`.
/// With `T_w = S C_w S = Q Λ Qᵀ` the posterior is
/// `Γ_pr − Γ_pr^{1/2} V̂ Q diag(λ/(1+λ)) Qᵀ V̂* Γ_pr^{1/2}`, and the
/// eigen form keeps the strongly informed directions accurate where an LU
/// solve with `C_w V_F*V_F + I` loses digits.
#[derive(Clone, Debug)]
pub struct FrozenSvd {
    pub u_f: DMatrix<f64>,
    /// Columns `V_F e_i` in `R^N`.
    pub v_f: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// `V_F* V_F`, diagonal with the squared singular values.
    pub gram_v: DMatrix<f64>,
    /// `Γ_pr^{1/2} V̂`.
    pub prior_half_basis: DMatrix<f64>,
    /// `(Γ_pr^{1/2} V̂)* (Γ_pr^{1/2} V̂)`, the gram used by the A-criterion.
    pub gram_prior: DMatrix<f64>,
    /// `A Γ_pr^{1/2} V̂`.
    pub goal_basis: DMatrix<f64>,
    /// Mass-weighted gram of `goal_basis`.
    pub gram_a: DMatrix<f64>,
    /// `V̂ = V_F S⁻¹`, M-orthonormal columns.
    pub v_hat: DMatrix<f64>,
    /// Mass gram of `P⊥ Γ_pr^{1/2} A* (A Γ_pr^{1/2} V̂)` where `P⊥` removes
    /// the span of `V̂`; couples the retained and deflated parts in `tr[(·)²]`.
    pub gram_a_cross: DMatrix<f64>,
    pub k_f: usize,
    pub oversampling: usize,
    /// Traces of the prior restricted to the complement of `V̂`, set once
    /// they have been estimated.
    pub deflated: Option<DeflatedTraces>,
}

/// Design-invariant traces of `A Γ_pr^{1/2} P⊥ Γ_pr^{1/2} A*` and
/// `Γ_pr^{1/2} P⊥ Γ_pr^{1/2}`. The frozen posterior equals the prior on that
/// complement, so these plus `k_f × k_f` algebra give the full criteria
/// without subtracting two large numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeflatedTraces {
    pub goal: f64,
    pub goal_sq: f64,
    pub prior: f64,
}

/// Randomized range sketch with one subspace iteration, then an exact
/// eigendecomposition of the projected gram matrix in the M-inner product.
/// Uses `k_f + p` forward probes and `k_f` goal applies (plus `k_f`
/// adjoint goal applies for the squared-trace products). Directions whose
/// singular value falls below `1e-12` of the largest are dropped, so the
/// stored rank can be smaller than `k_f`.
pub fn build_frozen_svd<G, R>(
    ip: &InverseProblem,
    goal: &G,
    k_f: usize,
    p: usize,
    rng: &mut R,
) -> Result<FrozenSvd>
where
    G: GoalOperator + ?Sized,
    R: Rng + ?Sized,
{
    let n = ip.dim();
    let n_y = ip.num_sensors();
    let l = k_f + p;
    if k_f == 0 || l > n_y.min(n) {
        return Err(invalid(format!(
            "k_f + p = {l} must lie in [1, min(n_y, N) = {}] with k_f >= 1",
            n_y.min(n)
        )));
    }
    let mass = &ip.prior.mass;
    let probes = from_columns(&(0..l).map(|_| ip.prior.white_noise(rng)).collect::<Vec<_>>(), n);
    let y0 = map_columns(&probes, |v| ip.apply_f_tilde(v));
    let q0 = y0.qr().q();
    let z0 = map_columns(&q0, |v| ip.apply_f_tilde_adjoint(v));
    let y1 = map_columns(&z0, |v| ip.apply_f_tilde(v));
    let q = y1.qr().q();
    let z = map_columns(&q, |v| ip.apply_f_tilde_adjoint(v));

    let gram = weighted_gram(mass, &z, &z);
    let (values, vectors) = sorted_eigen(&gram);
    let top = values[0].max(0.0).sqrt();
    let rank = (0..k_f)
        .take_while(|&i| values[i].max(0.0).sqrt() > 1e-12 * top)
        .count();
    if rank == 0 {
        return Err(Error::DegenerateData("forward map has no resolvable range".into()));
    }
    let wk = vectors.columns(0, rank).into_owned();
    let singular_values = values.rows(0, rank).map(|s| s.sqrt());
    let u_f = &q * &wk;
    let v_f = &z * &wk;
    let gram_v = DMatrix::from_diagonal(&singular_values.map(|s| s * s));
    let mut v_hat = v_f.clone();
    for (j, mut col) in v_hat.column_iter_mut().enumerate() {
        col /= singular_values[j];
    }

    let prior_half_basis = map_columns(&v_hat, |v| ip.prior.sqrt_apply(v));
    let gram_prior = weighted_gram(mass, &prior_half_basis, &prior_half_basis);
    let goal_basis = map_columns(&prior_half_basis, |v| goal.apply(v));
    let gram_a = weighted_gram(mass, &goal_basis, &goal_basis);
    let back = map_columns(&goal_basis, |v| ip.prior.sqrt_apply(&goal.apply_adjoint(v)));
    let back = map_columns(&back, |v| project_out(&v_hat, mass, v));
    let gram_a_cross = weighted_gram(mass, &back, &back);

    Ok(FrozenSvd {
        u_f,
        v_f,
        singular_values,
        gram_v,
        prior_half_basis,
        gram_prior,
        goal_basis,
        gram_a,
        v_hat,
        gram_a_cross,
        k_f,
        oversampling: p,
        deflated: None,
    })
}

/// Design-dependent factors of the frozen posterior in the `V̂` basis.
#[derive(Clone, Debug)]
pub struct FrozenWeights {
    /// `C_w = U_Fᵀ W_σ U_F`.
    pub c_w: DMatrix<f64>,
    /// Eigenvalues `λ` of `S C_w S`, descending.
    pub lambda: DVector<f64>,
    /// Matching orthonormal eigenvectors.
    pub q: DMatrix<f64>,
}

impl FrozenWeights {
    /// `Q diag(f(λ)) Qᵀ`.
    fn spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.lambda.map(|l| f(l.max(0.0)));
        let mut scaled = self.q.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= d[j];
        }
        &scaled * self.q.transpose()
    }

    /// `S X_w S = Q diag(λ/(1+λ)) Qᵀ`, the information captured by the design.
    pub fn reduction(&self) -> DMatrix<f64> {
        self.spectral(|l| l / (1.0 + l))
    }

    /// `I − S X_w S = Q diag(1/(1+λ)) Qᵀ`.
    pub fn damping(&self) -> DMatrix<f64> {
        self.spectral(|l| 1.0 / (1.0 + l))
    }

    /// `X_w = (C_w V_F*V_F + I)⁻¹ C_w` in the original `V_F` coordinates.
    pub fn x(&self, singular_values: &DVector<f64>) -> DMatrix<f64> {
        let r = self.reduction();
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| {
            r[(i, j)] / (singular_values[i] * singular_values[j])
        })
    }
}

impl FrozenSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn weights(&self, design: &Design) -> Result<FrozenWeights> {
        if design.len() != self.u_f.nrows() {
            return Err(invalid(format!(
                "design has {} weights, factorization expects {}",
                design.len(),
                self.u_f.nrows()
            )));
        }
        let pw = design.precision_weights();
        let mut scaled = self.u_f.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= pw[i];
        }
        let c_w = crate::linalg::symmetrize(&(self.u_f.transpose() * scaled));
        let s = &self.singular_values;
        let t = DMatrix::from_fn(s.len(), s.len(), |i, j| c_w[(i, j)] * s[i] * s[j]);
        let (lambda, q) = sorted_eigen(&t);
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(numerical("frozen posterior eigenvalues are not finite"));
        }
        Ok(FrozenWeights { c_w, lambda, q })
    }

    /// `tr[(I − S X S) Ĝ] − tr(Ĝ)`; the design-dependent part carries no
    /// cancellation.
    fn minus_form(&self, design: &Design, gram: &DMatrix<f64>) -> Result<f64> {
        if design.count() == 0 {
            return Ok(0.0);
        }
        let w = self.weights(design)?;
        Ok(trace_of_product(&w.damping(), gram) - gram.trace())
    }

    /// `Ψ^{cA}_{f−}(w) = −tr[X_w Ã*Ã]`.
    pub fn coed_minus(&self, design: &Design) -> Result<f64> {
        self.minus_form(design, &self.gram_a)
    }

    /// Classical A-criterion in minus form.
    pub fn classical_minus(&self, design: &Design) -> Result<f64> {
        self.minus_form(design, &self.gram_prior)
    }

    fn deflated_or_err(&self) -> Result<DeflatedTraces> {
        self.deflated.ok_or_else(|| {
            Error::ContractViolation("deflated prior traces have not been estimated".into())
        })
    }

    /// `tr(A Γ_pr A*)`.
    pub fn prior_goal_trace(&self) -> Result<f64> {
        Ok(self.deflated_or_err()?.goal + self.gram_a.trace())
    }

    /// `tr(Γ_pr)`.
    pub fn prior_trace(&self) -> Result<f64> {
        Ok(self.deflated_or_err()?.prior + self.gram_prior.trace())
    }

    /// `tr[(A Γ_pr A*)²]`.
    pub fn prior_goal_trace_sq(&self) -> Result<f64> {
        let d = self.deflated_or_err()?;
        Ok(d.goal_sq + 2.0 * self.gram_a_cross.trace() + trace_of_product(&self.gram_a, &self.gram_a))
    }

    /// `tr(A Γ_post A*)` under the frozen posterior.
    pub fn goal_posterior_trace(&self, design: &Design) -> Result<f64> {
        let d = self.deflated_or_err()?;
        let w = self.weights(design)?;
        Ok(d.goal + trace_of_product(&w.damping(), &self.gram_a))
    }

    /// `tr(Γ_post)` under the frozen posterior.
    pub fn posterior_trace(&self, design: &Design) -> Result<f64> {
        let d = self.deflated_or_err()?;
        let w = self.weights(design)?;
        Ok(d.prior + trace_of_product(&w.damping(), &self.gram_prior))
    }

    /// `tr[(A Γ_post A*)²]`. Equal to the expansion
    /// `tr(P²) − 2 tr(X Ã*PÃ) + tr((X Ã*Ã)²)`, evaluated as
    /// `tr(P⊥²) + 2 tr(D Ĝ_×) + tr((D Ĝ_A)²)` with `D = I − S X S` so that
    /// every term is nonnegative.
    pub fn goal_posterior_trace_sq(&self, design: &Design) -> Result<f64> {
        let d = self.deflated_or_err()?;
        let damp = self.weights(design)?.damping();
        let da = &damp * &self.gram_a;
        Ok(d.goal_sq + 2.0 * trace_of_product(&damp, &self.gram_a_cross)
            + trace_of_product(&da, &da))
    }

    /// `x − V̂ V̂* x`.
    pub fn project_out(&self, mass: &CsrMatrix, x: &DVector<f64>) -> DVector<f64> {
        project_out(&self.v_hat, mass, x)
    }
}

fn project_out(basis: &DMatrix<f64>, mass: &CsrMatrix, x: &DVector<f64>) -> DVector<f64> {
    let coeff = basis.transpose() * mass.mul_vec(x);
    x - basis * coeff
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenCriterion {
    pub psi_minus: f64,
    pub psi_full: Option<f64>,
}

/// Online cOED evaluation: `O(k_f³)` and no PDE solves.
pub fn eval_coed_frozen(svd: &FrozenSvd, design: &Design) -> Result<FrozenCriterion> {
    Ok(FrozenCriterion {
        psi_minus: svd.coed_minus(design)?,
        psi_full: svd.deflated.map(|_| svd.goal_posterior_trace(design)).transpose()?,
    })
}

pub fn eval_classical_a_frozen(svd: &FrozenSvd, design: &Design) -> Result<FrozenCriterion> {
    Ok(FrozenCriterion {
        psi_minus: svd.classical_minus(design)?,
        psi_full: svd.deflated.map(|_| svd.posterior_trace(design)).transpose()?,
    })
}

/// `Γ_pr v − Γ_pr^{1/2} V̂ (S X_w S) V̂* Γ_pr^{1/2} v`.
pub fn apply_postcov_frozen(
    svd: &FrozenSvd,
    prior: &Prior,
    design: &Design,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let base = prior.cov_apply(v);
    let w = svd.weights(design)?;
    if design.count() == 0 {
        return Ok(base);
    }
    let coeff = svd.prior_half_basis.transpose() * prior.mass.mul_vec(v);
    Ok(base - &svd.prior_half_basis * (w.reduction() * coeff))
}

/// Draws from the frozen posterior `N(mean, Γ_post)` using the symmetric
/// square root `Γ_pr^{1/2} (I + V C_w V*)^{-1/2}`.
pub fn sample_posterior_frozen<R: Rng + ?Sized>(
    svd: &FrozenSvd,
    prior: &Prior,
    design: &Design,
    mean: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let xi = prior.white_noise(rng);
    if design.count() == 0 {
        return Ok(mean + prior.sqrt_apply(&xi));
    }
    let (basis, shrink) = frozen_sqrt_factors(svd, design)?;
    let coeff = basis.transpose() * prior.mass.mul_vec(&xi);
    let x = xi - &basis * coeff.component_mul(&shrink);
    Ok(mean + prior.sqrt_apply(&x))
}

/// M-orthonormal basis `U = V̂ Q` and the factors `1 − (λ+1)^{-1/2}` with
/// `(I + V C_w V*)^{-1/2} = I − U diag(shrink) U*`.
fn frozen_sqrt_factors(svd: &FrozenSvd, design: &Design) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let w = svd.weights(design)?;
    let shrink = w.lambda.map(|l| 1.0 - 1.0 / (l.max(0.0) + 1.0).sqrt());
    Ok((&svd.v_hat * w.q, shrink))
}

/// Leading eigenpairs of `H̃(w)` with M-orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct SpectralDecomp {
    pub v_h: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub d: DVector<f64>,
    pub design: Design,
}

impl SpectralDecomp {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }
}

/// Lanczos with full reorthogonalization in the M-inner product, started
/// from a vector in the range of `H̃(w)`. Runs `min(k_h + 10, ‖w‖₁)` steps and
/// keeps the leading `k_h` Ritz pairs.
pub fn build_spectral<R: Rng + ?Sized>(
    ip: &InverseProblem,
    design: &Design,
    k_h: usize,
    rng: &mut R,
) -> Result<SpectralDecomp> {
    let n = ip.dim();
    let count = design.count();
    if design.len() != ip.num_sensors() {
        return Err(invalid("design length does not match the sensor count"));
    }
    if count == 0 {
        return Ok(SpectralDecomp {
            v_h: DMatrix::zeros(n, 0),
            lambda: DVector::zeros(0),
            d: DVector::zeros(0),
            design: design.clone(),
        });
    }
    if k_h == 0 || k_h > count {
        return Err(invalid(format!("k_h = {k_h} must lie in [1, ‖w‖₁ = {count}]")));
    }
    let steps = (k_h + 10).min(count);
    let h = |v: &DVector<f64>| ip.misfit_hessian_apply(design, v);
    let norm = |v: &DVector<f64>| ip.inner(v, v).max(0.0).sqrt();

    let mut q = h(&ip.prior.white_noise(rng));
    let q_norm = norm(&q);
    if !(q_norm > 0.0) || !q_norm.is_finite() {
        return Err(numerical("Lanczos start vector vanished"));
    }
    q /= q_norm;
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut scale: f64 = 0.0;
    loop {
        let j = basis.len() - 1;
        let mut w = h(&basis[j]);
        let a = ip.inner(&basis[j], &w);
        if !a.is_finite() {
            return Err(numerical("Lanczos produced a non-finite coefficient"));
        }
        alpha.push(a);
        scale = scale.max(a.abs());
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = ip.inner(b, &w);
                w.axpy(-c, b, 1.0);
            }
        }
        if basis.len() == steps {
            break;
        }
        let b = norm(&w);
        if b <= 1e-12 * scale {
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let (values, vectors) = sorted_eigen(&t);
    let keep = k_h.min(m);
    let qmat = from_columns(&basis, n);
    let v_h = qmat * vectors.columns(0, keep);
    let lambda = values.rows(0, keep).into_owned();
    let d = lambda.map(|l| l / (l + 1.0));
    Ok(SpectralDecomp {
        v_h,
        lambda,
        d,
        design: design.clone(),
    })
}

/// Randomized Nyström eigendecomposition of `H̃(w)`: `min(k_h + 10, ‖w‖₁)`
/// probes from the range of `H̃(w)`, M-orthonormalized to `Q`, and the
/// eigenpairs of the core `Q*H̃Q`.
pub fn build_spectral_nystrom<R: Rng + ?Sized>(
    ip: &InverseProblem,
    design: &Design,
    k_h: usize,
    rng: &mut R,
) -> Result<SpectralDecomp> {
    let count = design.count();
    if design.len() != ip.num_sensors() {
        return Err(invalid("design length does not match the sensor count"));
    }
    if count == 0 {
        return build_spectral(ip, design, k_h, rng);
    }
    if k_h == 0 || k_h > count {
        return Err(invalid(format!("k_h = {k_h} must lie in [1, ‖w‖₁ = {count}]")));
    }
    let h = |v: &DVector<f64>| ip.misfit_hessian_apply(design, v);
    let l = (k_h + 10).min(count);
    let probes: Vec<DVector<f64>> = (0..l).map(|_| h(&ip.prior.white_noise(rng))).collect();
    let q = m_gram_schmidt(ip, probes)?;
    let y = map_columns(&q, h);
    let core = weighted_gram(&ip.prior.mass, &q, &y);
    let (values, vectors) = sorted_eigen(&((&core + core.transpose()) * 0.5));
    let keep = k_h.min(values.len());
    let v_h = q * vectors.columns(0, keep);
    let lambda = values.rows(0, keep).map(|v| v.max(0.0));
    let d = lambda.map(|l| l / (l + 1.0));
    Ok(SpectralDecomp {
        v_h,
        lambda,
        d,
        design: design.clone(),
    })
}

pub fn build_spectral_with<R: Rng + ?Sized>(
    method: SpectralMethod,
    ip: &InverseProblem,
    design: &Design,
    k_h: usize,
    rng: &mut R,
) -> Result<SpectralDecomp> {
    match method {
        SpectralMethod::Lanczos => build_spectral(ip, design, k_h, rng),
        SpectralMethod::Nystrom => build_spectral_nystrom(ip, design, k_h, rng),
    }
}

/// Two-pass Gram-Schmidt in the M-inner product. Columns that fall below
/// `1e-12` of their original norm after projection are dropped.
fn m_gram_schmidt(ip: &InverseProblem, cols: Vec<DVector<f64>>) -> Result<DMatrix<f64>> {
    let n = ip.dim();
    let norm = |v: &DVector<f64>| ip.inner(v, v).max(0.0).sqrt();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(cols.len());
    for mut w in cols {
        let start = norm(&w);
        for _ in 0..2 {
            for b in &basis {
                let c = ip.inner(b, &w);
                w.axpy(-c, b, 1.0);
            }
        }
        let r = norm(&w);
        if r > 1e-12 * start && r.is_finite() {
            basis.push(w / r);
        }
    }
    if basis.is_empty() {
        return Err(numerical("Nyström probes vanished"));
    }
    Ok(from_columns(&basis, n))
}

/// `−tr(Ã_h D Ã_h*)` with `Ã_h = A Γ_pr^{1/2} V_h`; `k_h` goal applies.
pub fn eval_coed_spectral<G: GoalOperator + ?Sized>(
    spec: &SpectralDecomp,
    goal: &G,
    prior: &Prior,
) -> f64 {
    if spec.rank() == 0 {
        return 0.0;
    }
    let images = map_columns(&spec.v_h, |v| goal.apply(&prior.sqrt_apply(v)));
    let mass = &prior.mass;
    -(0..spec.rank())
        .map(|i| {
            let c = column_vector(&images, i);
            spec.d[i] * c.dot(&mass.mul_vec(&c))
        })
        .sum::<f64>()
}

/// Randomized Nyström sketch `T ≈ Y (Ω*Y)⁺ Y*` of an operator that is
/// self-adjoint and PSD in the M-inner product.
#[derive(Clone, Debug)]
pub struct NystromSketch {
    pub probes: DMatrix<f64>,
    pub images: DMatrix<f64>,
    /// Leave-one-out corrected trace estimate.
    pub trace: f64,
    /// `tr(T_nys²)`, reused for squared-trace terms.
    pub trace_sq: f64,
    /// Standard error of the leave-one-out trace estimate.
    pub error_estimate: f64,
}

impl NystromSketch {
    pub fn num_probes(&self) -> usize {
        self.probes.ncols()
    }

    pub fn relative_error(&self) -> f64 {
        if self.trace > 0.0 {
            self.error_estimate / self.trace
        } else {
            0.0
        }
    }
}

fn nystrom_traces(k: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (values, vectors) = sorted_eigen(k);
    let top = values.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Ok((0.0, 0.0));
    }
    if values.iter().any(|&v| v < -1e-8 * top) {
        return Err(Error::ContractViolation(
            "Nyström core matrix has a negative pivot; operator is not PSD".into(),
        ));
    }
    let cutoff = 1e-13 * top * k.nrows() as f64;
    let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] > cutoff).collect();
    let mut scaled = DMatrix::zeros(k.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        scaled.set_column(j, &(vectors.column(i) / values[i].sqrt()));
    }
    let core = crate::linalg::symmetrize(&(scaled.transpose() * g * &scaled));
    Ok((core.trace(), core.norm_squared()))
}

/// Builds the sketch from the given probe columns.
pub fn nystrom_trace<F>(apply: F, mass: &CsrMatrix, probes: DMatrix<f64>) -> Result<NystromSketch>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let images = map_columns(&probes, &apply);
    nystrom_from_images(mass, probes, images)
}

fn nystrom_from_images(
    mass: &CsrMatrix,
    probes: DMatrix<f64>,
    images: DMatrix<f64>,
) -> Result<NystromSketch> {
    let l = probes.ncols();
    let n = probes.nrows();
    if l < 2 {
        return Err(invalid("Nyström trace estimation needs at least two probes"));
    }
    let k = crate::linalg::symmetrize(&weighted_gram(mass, &probes, &images));
    let g = crate::linalg::symmetrize(&weighted_gram(mass, &images, &images));
    let (plain, trace_sq) = nystrom_traces(&k, &g)?;
    if l >= n {
        return Ok(NystromSketch {
            probes,
            images,
            trace: plain,
            trace_sq,
            error_estimate: 0.0,
        });
    }
    let p = crate::linalg::symmetrize(&weighted_gram(mass, &probes, &probes));
    let (trace, error_estimate) = exchangeable_trace(&k, &g, &p, n)?;
    Ok(NystromSketch {
        probes,
        images,
        trace,
        trace_sq,
        error_estimate,
    })
}

/// Leave-one-out estimator: for each probe `i`, the Nyström trace from the
/// other probes plus the residual quadratic form at probe `i`, averaged.
/// With `J = K⁻¹` the per-probe value is `tr(JG) − ((JGJ)_ii − 1) / J_ii`.
/// A small shift `ν I` keeps `K` invertible and is removed afterwards. The
/// shift grows while rounding noise in a rank-deficient core defeats the
/// factorization, up to the same tolerance the plain sketch accepts.
fn exchangeable_trace(
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    p: &DMatrix<f64>,
    n: usize,
) -> Result<(f64, f64)> {
    let l = k.nrows();
    let kt = k.trace();
    if kt <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let mut nu = 1e-10 * kt / p.trace();
    let (chol, nu) = loop {
        let ks = crate::linalg::symmetrize(&(k + p * nu));
        if let Some(c) = nalgebra::Cholesky::new(ks) {
            break (c, nu);
        }
        nu *= 10.0;
        if nu * p.trace() > 1e-7 * kt {
            return Err(Error::ContractViolation(
                "Nyström core matrix has a negative pivot; operator is not PSD".into(),
            ));
        }
    };
    let gs = g + k * (2.0 * nu) + p * (nu * nu);
    let j = chol.inverse();
    let jg = &j * &gs;
    let jgj = &jg * &j;
    let base = jg.trace();
    let per_probe: Vec<f64> = (0..l)
        .map(|i| base - (jgj[(i, i)] - 1.0) / j[(i, i)] - nu * n as f64)
        .collect();
    let mean = crate::linalg::pairwise_sum(&per_probe) / l as f64;
    let var = per_probe.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (l - 1) as f64;
    Ok((mean, (var / l as f64).sqrt()))
}

/// Starts with `initial` probes and doubles the count while the relative
/// error estimate exceeds `rel_tol`, never exceeding `max_probes`. Earlier
/// probes and their images are reused.
pub fn nystrom_trace_adaptive<F, P>(
    apply: F,
    mass: &CsrMatrix,
    initial: usize,
    rel_tol: f64,
    max_probes: usize,
    mut draw_probe: P,
) -> Result<NystromSketch>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
    P: FnMut() -> DVector<f64>,
{
    let n = mass.nrows();
    let cap = max_probes.min(n).max(2);
    let mut l = initial.clamp(2, cap);
    let probes = from_columns(&(0..l).map(|_| draw_probe()).collect::<Vec<_>>(), n);
    let images = map_columns(&probes, &apply);
    let mut sketch = nystrom_from_images(mass, probes, images)?;
    while sketch.relative_error() > rel_tol && l < cap {
        let extra = (2 * l).min(cap) - l;
        let new_probes = from_columns(&(0..extra).map(|_| draw_probe()).collect::<Vec<_>>(), n);
        let new_images = map_columns(&new_probes, &apply);
        let mut probes = sketch.probes.clone().resize_horizontally(l + extra, 0.0);
        let mut images = sketch.images.clone().resize_horizontally(l + extra, 0.0);
        probes.columns_mut(l, extra).copy_from(&new_probes);
        images.columns_mut(l, extra).copy_from(&new_images);
        l += extra;
        sketch = nystrom_from_images(mass, probes, images)?;
    }
    Ok(sketch)
}

/// Gaussian probes with covariance `I` (for Euclidean operators in tests and
/// small toolkits).
pub fn gaussian_probes<R: Rng + ?Sized>(n: usize, l: usize, rng: &mut R) -> DMatrix<f64> {
    from_columns(&(0..l).map(|_| standard_normal(n, rng)).collect::<Vec<_>>(), n)
}
