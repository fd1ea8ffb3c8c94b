//! Optimal control of the terminal state for a fixed parameter estimate.
//!
//! `Φ(z; m) = ½‖A m + B z + q − ū‖²_M + β/2 ‖z‖²_{M_t}` is minimized by
//! `(B*B + βI) z = B*(ū − q − A m)` where `B* = M_t⁻¹ Bᵀ M` is the adjoint
//! between the weighted spaces.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::bayes::GaussianBelief;
use crate::error::{invalid, numerical, Error, Result};
use crate::heat::TerminalMap;
use crate::linalg::cg;

pub const CONTROL_CG_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub beta_reg: f64,
    pub target: DVector<f64>,
    pub map: Arc<TerminalMap>,
}

#[derive(Clone, Debug)]
pub struct NominalControl {
    pub z_star: DVector<f64>,
    pub m_source: DVector<f64>,
    /// `Φ*_ctrl` at the parameter the control was computed for.
    pub objective_at_source: f64,
    pub cg_iterations: usize,
}

/// Dense control operators for many solves with the same problem.
#[derive(Clone, Debug)]
pub struct ControlCache {
    /// `B` as an `N × nt` matrix.
    pub b: DMatrix<f64>,
    /// `B*` as an `nt × N` matrix acting on states.
    pub bstar_m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl ControlCache {
    /// `z* = H_ctrl⁻¹ B* d` for a state-space residual `d = ū − q − A m`.
    pub fn solve(&self, d: &DVector<f64>) -> DVector<f64> {
        let rhs = (&self.bstar_m * d).component_mul(&self.weights);
        self.chol.solve(&rhs)
    }

    pub fn apply_b(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.b * z
    }
}

impl ControlProblem {
    pub fn new(map: Arc<TerminalMap>, target: DVector<f64>, beta_reg: f64) -> Result<Self> {
        if !(beta_reg > 0.0) || !beta_reg.is_finite() {
            return Err(invalid(format!("beta_reg must be positive, got {beta_reg}")));
        }
        if target.len() != map.dim() {
            return Err(invalid("target length does not match the state dimension"));
        }
        Ok(Self {
            beta_reg,
            target,
            map,
        })
    }

    pub fn uniform_target(map: &TerminalMap, value: f64) -> DVector<f64> {
        DVector::from_element(map.dim(), value)
    }

    /// `u_T(m_ref, z₀)` for a constant control `z₀`.
    pub fn reachable_target(map: &TerminalMap, m_ref: &DVector<f64>, z0: f64) -> DVector<f64> {
        map.terminal_state(m_ref, &DVector::from_element(map.control_dim(), z0))
    }

    fn time_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.map.grid().inner(a, b)
    }

    /// `H_ctrl z = B*B z + β z`.
    pub fn hessian_apply(&self, z: &DVector<f64>) -> DVector<f64> {
        self.map.apply_b_adjoint(&self.map.apply_b(z)) + z * self.beta_reg
    }

    /// Right-hand side `B*(ū − q − A m)`.
    pub fn rhs(&self, m: &DVector<f64>) -> DVector<f64> {
        let d = &self.target - self.map.offset() - self.map.apply_a(m);
        self.map.apply_b_adjoint(&d)
    }

    fn check_m(&self, m: &DVector<f64>) -> Result<()> {
        if m.len() != self.map.dim() {
            return Err(invalid(format!(
                "parameter has length {}, expected {}",
                m.len(),
                self.map.dim()
            )));
        }
        Ok(())
    }

    fn check_z(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.map.control_dim() {
            return Err(invalid(format!(
                "control has length {}, expected {}",
                z.len(),
                self.map.control_dim()
            )));
        }
        Ok(())
    }

    /// Solves for the control given the right-hand side `B*(ū − q − A m)`.
    pub fn solve_with_rhs(&self, rhs: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let out = cg::solve(
            |z| self.hessian_apply(z),
            |a, b| self.time_inner(a, b),
            rhs,
            CONTROL_CG_TOLERANCE,
            10 * self.map.control_dim() + 50,
        )
        .map_err(|e| match e {
            Error::NumericalFailure(msg) => numerical(format!("optimal control: {msg}")),
            other => other,
        })?;
        Ok((out.x, out.iterations))
    }

    pub fn solve_optimal_control(&self, m: &DVector<f64>) -> Result<NominalControl> {
        self.check_m(m)?;
        let (z, iterations) = self.solve_with_rhs(&self.rhs(m))?;
        let objective = self.control_objective(m, &z)?;
        Ok(NominalControl {
            z_star: z,
            m_source: m.clone(),
            objective_at_source: objective,
            cg_iterations: iterations,
        })
    }

    /// `Φ*_ctrl = ½‖A m + B z + q − ū‖²_M`, without the regularization.
    pub fn control_objective(&self, m: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        self.check_m(m)?;
        self.check_z(z)?;
        let r = self.map.terminal_state(m, z) - &self.target;
        Ok(0.5 * self.map.inner_m(&r, &r))
    }

    /// Regularized objective `Φ(z; m)`.
    pub fn regularized_objective(&self, m: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        Ok(self.control_objective(m, z)? + 0.5 * self.beta_reg * self.time_inner(z, z))
    }

    /// `‖u_T(m, z) − ū‖_M`.
    pub fn distance_to_target(&self, m: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        Ok((2.0 * self.control_objective(m, z)?).sqrt())
    }

    /// Relative reduction of the distance to the target: the controlled
    /// terminal state against the initial state `û(m)`.
    pub fn improvement(&self, m: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        let controlled = self.distance_to_target(m, z)?;
        let r0 = self.map.steady().solve_steady(m)? - &self.target;
        let initial = self.map.inner_m(&r0, &r0).sqrt();
        if initial == 0.0 {
            return Ok(0.0);
        }
        Ok(1.0 - controlled / initial)
    }

    /// Dense `B` and a Cholesky factor of `H_ctrl` for repeated solves.
    pub fn precompute(&self) -> Result<ControlCache> {
        let nt = self.map.control_dim();
        let n = self.map.dim();
        let mut b = DMatrix::zeros(n, nt);
        for k in 0..nt {
            let mut e = DVector::zeros(nt);
            e[k] = 1.0;
            b.set_column(k, &self.map.apply_b(&e));
        }
        let mass = &self.map.steady().mass;
        let mut mb = DMatrix::zeros(n, nt);
        for k in 0..nt {
            mb.set_column(k, &mass.mul_vec(&b.column(k).into_owned()));
        }
        let w = &self.map.grid().weights;
        // B* = M_t⁻¹ Bᵀ M
        let mut bstar_m = mb.transpose();
        for (k, mut row) in bstar_m.row_iter_mut().enumerate() {
            row /= w[k];
        }
        let h = &bstar_m * &b + DMatrix::identity(nt, nt) * self.beta_reg;
        // symmetric in the M_t inner product: factor W_t H instead
        let wt = DMatrix::from_diagonal(w);
        let sym = crate::linalg::symmetrize(&(&wt * &h));
        let chol = Cholesky::new(sym).ok_or_else(|| numerical("control Hessian is not positive definite"))?;
        Ok(ControlCache { b, bstar_m, chol, weights: w.clone() })
    }

    /// Law of `u_T(m, z*)` for `m` distributed as `posterior`.
    pub fn terminal_state_law(&self, posterior: &GaussianBelief, z_star: &DVector<f64>) -> Result<GaussianBelief> {
        self.check_z(z_star)?;
        let mean = self.map.terminal_state(&posterior.mean, z_star);
        let map = self.map.clone();
        let post = posterior.clone();
        Ok(GaussianBelief {
            mean,
            cov: Arc::new(move |v| map.apply_a(&post.apply_cov(&map.apply_a_adjoint(v)))),
            kind: posterior.kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::SolveCounter;
    use crate::fem::{
        assemble_operators, assemble_temporal, build_mesh, MassMode, PdeCoefficients, Side,
        VelocityField,
    };
    use crate::heat::{SteadyModel, TransientModel};
    use nalgebra::DMatrix;

    fn problem(beta: f64) -> ControlProblem {
        let mesh = build_mesh(8, &[Side::Right]).unwrap();
        let ops = assemble_operators(
            &mesh,
            PdeCoefficients::default(),
            &VelocityField::default(),
            MassMode::Consistent,
        )
        .unwrap();
        let grid = assemble_temporal(1.0, 20).unwrap();
        let chi = mesh.box_indicator([0.25, 0.25], [0.45, 0.45]);
        let c = SolveCounter::new();
        let steady = Arc::new(SteadyModel::new(&ops, c.clone()).unwrap());
        let transient = Arc::new(TransientModel::new(&ops, chi, grid, c).unwrap());
        let map = Arc::new(TerminalMap::new(steady, transient).unwrap());
        let target = ControlProblem::uniform_target(&map, 1.0);
        ControlProblem::new(map, target, beta).unwrap()
    }

    fn source(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| 0.5 + 0.3 * (i as f64 * 0.7).sin())
    }

    #[test]
    fn rejects_bad_regularization() {
        let p = problem(1e-5);
        assert!(ControlProblem::new(p.map.clone(), p.target.clone(), 0.0).is_err());
        assert!(ControlProblem::new(p.map.clone(), p.target.clone(), -1.0).is_err());
    }

    #[test]
    fn matches_dense_normal_equations() {
        let p = problem(1e-5);
        let nt = p.map.control_dim();
        let n = p.map.dim();
        let m = source(n);
        let z = p.solve_optimal_control(&m).unwrap().z_star;
        let mut b = DMatrix::zeros(n, nt);
        for k in 0..nt {
            let mut e = DVector::zeros(nt);
            e[k] = 1.0;
            b.set_column(k, &p.map.apply_b(&e));
        }
        let mass = p.map.steady().mass.to_dense();
        let dt = p.map.grid().dt;
        let h = b.transpose() * &mass * &b / dt + DMatrix::identity(nt, nt) * p.beta_reg;
        let d = &p.target - p.map.offset() - p.map.apply_a(&m);
        let rhs = b.transpose() * &mass * d / dt;
        let dense = h.lu().solve(&rhs).unwrap();
        assert!((&z - &dense).norm() <= 1e-8 * dense.norm());
    }

    #[test]
    fn reached_target_needs_no_control() {
        let mut p = problem(1e-5);
        let m = source(p.map.dim());
        p.target = p.map.terminal_state(&m, &DVector::zeros(p.map.control_dim()));
        let z = p.solve_optimal_control(&m).unwrap().z_star;
        assert_eq!(z.amax(), 0.0);
        assert!(p.control_objective(&m, &z).unwrap() < 1e-24);
    }

    #[test]
    fn heavy_regularization_suppresses_control() {
        let p = problem(1e12);
        let m = source(p.map.dim());
        let z = p.solve_optimal_control(&m).unwrap().z_star;
        let rhs = p.rhs(&m);
        let grid = p.map.grid();
        assert!(grid.inner(&z, &z).sqrt() <= 1e-6 * rhs.norm());
    }

    #[test]
    fn optimality_and_affinity() {
        let p = problem(1e-5);
        let n = p.map.dim();
        let m1 = source(n);
        let m2 = DVector::from_fn(n, |i, _| (i as f64 * 0.13).cos());
        let z1 = p.solve_optimal_control(&m1).unwrap().z_star;
        let base = p.regularized_objective(&m1, &z1).unwrap();
        for k in 0..5 {
            let dz = DVector::from_fn(p.map.control_dim(), |i, _| ((i + k) as f64).sin() * 1e-3);
            assert!(p.regularized_objective(&m1, &(&z1 + dz)).unwrap() >= base - 1e-12);
        }
        let z2 = p.solve_optimal_control(&m2).unwrap().z_star;
        let a = 0.3;
        let zm = p.solve_optimal_control(&(&m1 * a + &m2 * (1.0 - a))).unwrap().z_star;
        let comb = &z1 * a + &z2 * (1.0 - a);
        assert!((zm - &comb).norm() <= 1e-9 * comb.norm());
    }

    #[test]
    fn cached_solve_matches_cg() {
        let p = problem(1e-5);
        let m = source(p.map.dim());
        let cache = p.precompute().unwrap();
        let d = &p.target - p.map.offset() - p.map.apply_a(&m);
        let fast = cache.solve(&d);
        let z = p.solve_optimal_control(&m).unwrap().z_star;
        assert!((&fast - &z).norm() <= 1e-8 * z.norm());
        assert!((cache.apply_b(&z) - p.map.apply_b(&z)).norm() <= 1e-12 * z.norm());
    }

    #[test]
    fn objective_is_quadratic_in_the_deviation() {
        let p = problem(1e-5);
        let n = p.map.dim();
        let m = source(n);
        let z = DVector::from_element(p.map.control_dim(), 0.2);
        let base = p.map.terminal_state(&m, &z);
        let mut p2 = p.clone();
        p2.target = base.clone() - DVector::from_element(n, 0.1);
        let mut p4 = p.clone();
        p4.target = base - DVector::from_element(n, 0.2);
        let o2 = p2.control_objective(&m, &z).unwrap();
        let o4 = p4.control_objective(&m, &z).unwrap();
        assert!((o4 - 4.0 * o2).abs() <= 1e-10 * o4);
    }
}
