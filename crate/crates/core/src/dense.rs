//! Dense reference computations for small meshes.
//!
//! Every operator is assembled column by column from the matrix-free applies
//! and then combined with direct inverses, so the results are independent of
//! the iterative and low-rank paths. Only practical for `N` up to a few
//! hundred.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::bayes::{standard_normal, Design, InverseProblem};
use crate::error::{numerical, Result};
use crate::heat::TerminalMap;
use crate::linalg::{map_columns, symmetrize};

pub const MAX_DENSE_DIM: usize = 2000;

#[derive(Clone, Debug)]
pub struct DenseModel {
    pub mass: DMatrix<f64>,
    pub mass_inv: DMatrix<f64>,
    /// `F` (n_y × N).
    pub forward: DMatrix<f64>,
    pub obs_offset: DVector<f64>,
    /// `Γ_pr^{1/2}` as an operator on `R^N_M`.
    pub prior_sqrt: DMatrix<f64>,
    pub prior_cov: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    /// `A` (N × N); identity when no terminal map is supplied.
    pub goal: DMatrix<f64>,
    /// `B` (N × nt), empty without a terminal map.
    pub control: DMatrix<f64>,
    pub goal_offset: DVector<f64>,
    /// Temporal weights of the control inner product.
    pub time_weights: DVector<f64>,
}

fn identity_columns(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

impl DenseModel {
    pub fn build(ip: &InverseProblem, map: Option<&TerminalMap>) -> Result<Self> {
        let n = ip.dim();
        if n > MAX_DENSE_DIM {
            return Err(numerical(format!(
                "dense mode is limited to {MAX_DENSE_DIM} unknowns, mesh has {n}"
            )));
        }
        let mass = ip.prior.mass.to_dense();
        let mass_inv = mass
            .clone()
            .try_inverse()
            .ok_or_else(|| numerical("mass matrix is singular"))?;
        let eye = identity_columns(n);
        let forward = map_columns(&eye, |e| ip.obs.apply_f(e));
        let elliptic_inv = ip
            .prior
            .elliptic
            .to_dense()
            .try_inverse()
            .ok_or_else(|| numerical("prior operator is singular"))?;
        let prior_sqrt = elliptic_inv * &mass;
        let prior_cov = &prior_sqrt * &prior_sqrt;
        let (goal, control, goal_offset, time_weights) = match map {
            Some(map) => {
                let nt = map.control_dim();
                let a = map_columns(&eye, |e| map.apply_a(e));
                let b = map_columns(&identity_columns(nt), |e| map.apply_b(e));
                let w = map.grid().weights.clone();
                (a, b, map.offset().clone(), w)
            }
            None => (eye.clone(), DMatrix::zeros(n, 0), DVector::zeros(n), DVector::zeros(0)),
        };
        Ok(Self {
            mass,
            mass_inv,
            forward,
            obs_offset: ip.obs.offset.clone(),
            prior_sqrt,
            prior_cov,
            prior_mean: ip.prior.mean.clone(),
            goal,
            control,
            goal_offset,
            time_weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    /// M-weighted adjoint `M⁻¹ Xᵀ M` of a square operator.
    pub fn adjoint(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.mass_inv * x.transpose() * &self.mass
    }

    /// `Γ_post = (F* W F + Γ_pr⁻¹)⁻¹` by direct inversion.
    pub fn posterior_cov(&self, design: &Design) -> Result<DMatrix<f64>> {
        let w = DMatrix::from_diagonal(&design.precision_weights());
        let prior_inv = self
            .prior_cov
            .clone()
            .try_inverse()
            .ok_or_else(|| numerical("prior covariance is singular"))?;
        let fstar = &self.mass_inv * self.forward.transpose();
        let h = &fstar * w * &self.forward + prior_inv;
        h.try_inverse()
            .ok_or_else(|| numerical("posterior precision is singular"))
    }

    pub fn map_point(&self, design: &Design, y: &DVector<f64>) -> Result<DVector<f64>> {
        let post = self.posterior_cov(design)?;
        let w = DMatrix::from_diagonal(&design.precision_weights());
        let resid = y - &self.obs_offset - &self.forward * &self.prior_mean;
        let fstar = &self.mass_inv * self.forward.transpose();
        Ok(&self.prior_mean + post * fstar * w * resid)
    }

    /// Covariance matrix `Γ M⁻¹` of a Gaussian with covariance operator `Γ`.
    pub fn covariance_matrix(&self, op: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(op * &self.mass_inv))
    }

    pub fn trace_cov(&self, design: &Design) -> Result<f64> {
        Ok(self.posterior_cov(design)?.trace())
    }

    /// `A Γ A*` as an operator.
    pub fn goal_cov(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        &self.goal * cov * self.adjoint(&self.goal)
    }

    pub fn goal_trace(&self, design: &Design) -> Result<f64> {
        Ok(self.goal_cov(&self.posterior_cov(design)?).trace())
    }

    /// Lower Cholesky factor of the covariance matrix `Γ M⁻¹`.
    pub fn sampler(&self, op: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cov = self.covariance_matrix(op);
        let scale = cov.diagonal().amax().max(f64::MIN_POSITIVE);
        let jitter = DMatrix::identity(cov.nrows(), cov.nrows()) * (1e-14 * scale);
        Cholesky::new(cov + jitter)
            .map(|c| c.l())
            .ok_or_else(|| numerical("covariance is not positive definite"))
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        mean: &DVector<f64>,
        chol: &DMatrix<f64>,
        rng: &mut R,
    ) -> DVector<f64> {
        mean + chol * standard_normal(chol.ncols(), rng)
    }

    /// Optimal control by the dense normal equations
    /// `(B*B + βI) z = B*(ū − q − A m)` with `B* = M_t⁻¹ Bᵀ M`.
    pub fn optimal_control(&self, beta: f64, target: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        let nt = self.control.ncols();
        let wt_inv = DMatrix::from_diagonal(&self.time_weights.map(|w| 1.0 / w));
        let bstar = wt_inv * self.control.transpose() * &self.mass;
        let h = &bstar * &self.control + DMatrix::identity(nt, nt) * beta;
        let rhs = &bstar * (target - &self.goal_offset - &self.goal * m);
        h.lu()
            .solve(&rhs)
            .ok_or_else(|| numerical("control normal equations are singular"))
    }
}
