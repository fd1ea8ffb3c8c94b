//! Steady initial-condition model, backward-Euler transient model and the
//! affine terminal-state map `u_T(m, z) = A m + B z + q`.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::counter::SolveCounter;
use crate::error::{invalid, Result};
use crate::fem::{FeOperators, TemporalGrid};
use crate::linalg::{BandedCholesky, BandedLu, CsrMatrix};

/// `A_st u = M m + g` with `A_st = κK − κγ_h R`.
#[derive(Debug)]
pub struct SteadyModel {
    pub system: CsrMatrix,
    pub mass: CsrMatrix,
    pub load: DVector<f64>,
    factor: BandedCholesky,
    mass_factor: BandedCholesky,
    offset: DVector<f64>,
    counter: SolveCounter,
}

impl SteadyModel {
    pub fn new(ops: &FeOperators, counter: SolveCounter) -> Result<Self> {
        let c = ops.coefficients;
        let system = ops
            .stiffness
            .linear_combination(c.kappa, &ops.robin_mass, -c.kappa * c.gamma_h);
        let factor = BandedCholesky::factor(&system)?;
        let mass_factor = BandedCholesky::factor(&ops.mass)?;
        let offset = factor.solve(&ops.robin_load);
        Ok(Self {
            system,
            mass: ops.mass.clone(),
            load: ops.robin_load.clone(),
            factor,
            mass_factor,
            offset,
            counter,
        })
    }

    pub fn dim(&self) -> usize {
        self.system.nrows()
    }

    /// Full steady state `û = S m + s`.
    pub fn solve_steady(&self, m: &DVector<f64>) -> Result<DVector<f64>> {
        if m.len() != self.dim() {
            return Err(invalid(format!(
                "parameter has length {}, expected {}",
                m.len(),
                self.dim()
            )));
        }
        Ok(self.apply_s(m) + &self.offset)
    }

    /// Linear part `S m = A_st⁻¹ M m`.
    pub fn apply_s(&self, m: &DVector<f64>) -> DVector<f64> {
        self.counter.bump();
        self.factor.solve(&self.mass.mul_vec(m))
    }

    /// `A_st⁻¹ v` (A_st is symmetric, so this is also the transposed solve).
    pub fn solve_system(&self, v: &DVector<f64>) -> DVector<f64> {
        self.counter.bump();
        self.factor.solve(v)
    }

    /// Offset `s = A_st⁻¹ g`.
    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn mass_factor(&self) -> &BandedCholesky {
        &self.mass_factor
    }

    pub fn counter(&self) -> &SolveCounter {
        &self.counter
    }
}

/// Backward Euler for `M u' + (κK + N − κγ_h R) u = M m + z M χ_c + g`.
#[derive(Debug)]
pub struct TransientModel {
    pub mass: CsrMatrix,
    pub load: DVector<f64>,
    pub control_indicator: DVector<f64>,
    pub grid: TemporalGrid,
    pub implicit: CsrMatrix,
    mass_chi: DVector<f64>,
    factor: BandedLu,
    counter: SolveCounter,
}

impl TransientModel {
    pub fn new(
        ops: &FeOperators,
        control_indicator: DVector<f64>,
        grid: TemporalGrid,
        counter: SolveCounter,
    ) -> Result<Self> {
        if control_indicator.len() != ops.dim() {
            return Err(invalid("control indicator has the wrong length"));
        }
        if control_indicator.iter().all(|&v| v == 0.0) {
            return Err(invalid("control region contains no mesh node"));
        }
        let c = ops.coefficients;
        let spatial = ops
            .stiffness
            .scaled(c.kappa)
            .linear_combination(1.0, &ops.advection, 1.0)
            .linear_combination(1.0, &ops.robin_mass, -c.kappa * c.gamma_h);
        let implicit = ops.mass.linear_combination(1.0, &spatial, grid.dt);
        let factor = BandedLu::factor(&implicit)?;
        let mass_chi = ops.mass.mul_vec(&control_indicator);
        Ok(Self {
            mass: ops.mass.clone(),
            load: ops.robin_load.clone(),
            control_indicator,
            grid,
            implicit,
            mass_chi,
            factor,
            counter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    /// Runs the time loop from `u0` with the constant right-hand side
    /// `source` (already in load-vector form) and optional control values.
    /// Returns every state when `keep_all`, else just the terminal one.
    fn march(
        &self,
        u0: DVector<f64>,
        source: Option<&DVector<f64>>,
        control: Option<&DVector<f64>>,
        keep_all: bool,
    ) -> Vec<DVector<f64>> {
        let dt = self.grid.dt;
        let mut states = Vec::with_capacity(if keep_all { self.steps() + 1 } else { 1 });
        let mut u = u0;
        for k in 0..self.steps() {
            let mut rhs = self.mass.mul_vec(&u);
            if let Some(src) = source {
                rhs.axpy(dt, src, 1.0);
            }
            if let Some(z) = control {
                rhs.axpy(dt * z[k], &self.mass_chi, 1.0);
            }
            let next = self.factor.solve(&rhs);
            self.counter.bump();
            if keep_all {
                states.push(std::mem::replace(&mut u, next));
            } else {
                u = next;
            }
        }
        states.push(u);
        states
    }

    /// Full trajectory (`nt + 1` states) for parameter `m`, control `z` and
    /// initial state `u0`.
    pub fn solve_transient(
        &self,
        m: &DVector<f64>,
        z: &DVector<f64>,
        u0: &DVector<f64>,
    ) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        if m.len() != n || u0.len() != n || z.len() != self.steps() {
            return Err(invalid(format!(
                "transient solve: expected m, u0 of length {n} and z of length {}",
                self.steps()
            )));
        }
        let source = self.mass.mul_vec(m) + &self.load;
        Ok(self.march(u0.clone(), Some(&source), Some(z), true))
    }

    /// Reverse sweep shared by the adjoints: starting from `λ = M u` returns
    /// `p_k = E⁻ᵀ λ_{k+1}` for each step and the final `λ_0`.
    fn reverse_sweep(&self, u: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let mut lambda = self.mass.mul_vec(u);
        let mut ps = vec![DVector::zeros(0); self.steps()];
        for k in (0..self.steps()).rev() {
            let p = self.factor.solve_transpose(&lambda);
            self.counter.bump();
            lambda = self.mass.mul_vec(&p);
            ps[k] = p;
        }
        (ps, lambda)
    }

    pub fn counter(&self) -> &SolveCounter {
        &self.counter
    }
}

/// Affine terminal-state map with matrix-free applies and M-weighted adjoints.
#[derive(Debug, Clone)]
pub struct TerminalMap {
    steady: Arc<SteadyModel>,
    transient: Arc<TransientModel>,
    offset: DVector<f64>,
}

impl TerminalMap {
    pub fn new(steady: Arc<SteadyModel>, transient: Arc<TransientModel>) -> Result<Self> {
        if steady.dim() != transient.dim() {
            return Err(invalid("steady and transient models disagree on dimension"));
        }
        let offset = Self::compute_offset(&steady, &transient);
        Ok(Self {
            steady,
            transient,
            offset,
        })
    }

    fn compute_offset(steady: &SteadyModel, transient: &TransientModel) -> DVector<f64> {
        transient
            .march(steady.offset().clone(), Some(&transient.load), None, false)
            .pop()
            .unwrap()
    }

    /// Recomputes `q` from scratch; it depends on neither design nor data.
    pub fn recompute_offset(&self) -> DVector<f64> {
        Self::compute_offset(&self.steady, &self.transient)
    }

    pub fn dim(&self) -> usize {
        self.steady.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.transient.steps()
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn steady(&self) -> &Arc<SteadyModel> {
        &self.steady
    }

    pub fn transient(&self) -> &Arc<TransientModel> {
        &self.transient
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.transient.grid
    }

    /// `A m`: the parameter enters both the initial state and the source.
    pub fn apply_a(&self, m: &DVector<f64>) -> DVector<f64> {
        let u0 = self.steady.apply_s(m);
        let src = self.transient.mass.mul_vec(m);
        self.transient.march(u0, Some(&src), None, false).pop().unwrap()
    }

    /// `A* u = M⁻¹ Aᵀ M u` by the discrete adjoint of the time loop.
    pub fn apply_a_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        let (ps, lambda0) = self.transient.reverse_sweep(u);
        let dt = self.transient.grid.dt;
        let mut acc = self.steady.solve_system(&lambda0);
        for p in &ps {
            acc.axpy(dt, p, 1.0);
        }
        acc
    }

    pub fn apply_b(&self, z: &DVector<f64>) -> DVector<f64> {
        let u0 = DVector::zeros(self.dim());
        self.transient.march(u0, None, Some(z), false).pop().unwrap()
    }

    /// `B* u = M_t⁻¹ Bᵀ M u`.
    pub fn apply_b_adjoint(&self, u: &DVector<f64>) -> DVector<f64> {
        let (ps, _) = self.transient.reverse_sweep(u);
        let grid = &self.transient.grid;
        DVector::from_iterator(
            grid.steps,
            ps.iter()
                .zip(grid.weights.iter())
                .map(|(p, w)| grid.dt * self.transient.mass_chi.dot(p) / w),
        )
    }

    /// `u_T(m, z) = A m + B z + q`.
    pub fn terminal_state(&self, m: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.apply_a(m) + self.apply_b(z) + &self.offset
    }

    /// Applies `A` to every column in parallel.
    pub fn apply_a_columns(&self, cols: &[DVector<f64>]) -> Vec<DVector<f64>> {
        cols.par_iter().map(|c| self.apply_a(c)).collect()
    }

    pub fn apply_a_adjoint_columns(&self, cols: &[DVector<f64>]) -> Vec<DVector<f64>> {
        cols.par_iter().map(|c| self.apply_a_adjoint(c)).collect()
    }

    pub fn inner_m(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&self.steady.mass.mul_vec(b))
    }
}
