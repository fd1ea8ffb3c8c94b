//! Gaussian prior, point-sensor observation model, synthetic data and the
//! design-weighted posterior.
//!
//! All parameter-space vectors live in `R^N` with the mass-weighted inner
//! product `<a, b>_M = aᵀ M b`. A Gaussian with covariance operator `Γ` in this
//! space has covariance matrix `Γ M⁻¹`, and adjoints take the form
//! `X* = M⁻¹ Xᵀ M`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::counter::SolveCounter;
use crate::error::{invalid, numerical, Error, Result};
use crate::fem::{FeOperators, Mesh};
use crate::heat::SteadyModel;
use crate::linalg::{cg, BandedCholesky, CsrMatrix};

pub const CG_TOLERANCE: f64 = 1e-10;
pub const CG_MAX_ITER: usize = 2000;

/// Draws a vector of independent standard normals.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Elliptic prior with `Γ_pr^{1/2} = (αK + βM)⁻¹ M`.
#[derive(Debug)]
pub struct Prior {
    pub alpha: f64,
    pub beta: f64,
    pub mean: DVector<f64>,
    pub mass: CsrMatrix,
    pub elliptic: CsrMatrix,
    elliptic_factor: BandedCholesky,
    mass_factor: BandedCholesky,
    counter: SolveCounter,
}

impl Prior {
    pub fn new(ops: &FeOperators, alpha: f64, beta: f64, counter: SolveCounter) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(invalid(format!(
                "prior coefficients must be positive (alpha={alpha}, beta={beta})"
            )));
        }
        let elliptic = ops.stiffness.linear_combination(alpha, &ops.mass, beta);
        let elliptic_factor = BandedCholesky::factor(&elliptic)?;
        let mass_factor = BandedCholesky::factor(&ops.mass)?;
        Ok(Self {
            alpha,
            beta,
            mean: DVector::zeros(ops.dim()),
            mass: ops.mass.clone(),
            elliptic,
            elliptic_factor,
            mass_factor,
            counter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.counter.bump();
        self.elliptic_factor.solve(&self.mass.mul_vec(v))
    }

    pub fn cov_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.sqrt_apply(&self.sqrt_apply(v))
    }

    /// `Γ_pr^{-1/2} v = M⁻¹ (αK + βM) v`.
    pub fn inv_sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.mass_factor.solve(&self.elliptic.mul_vec(v))
    }

    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&self.mass.mul_vec(b))
    }

    pub fn mass_factor(&self) -> &BandedCholesky {
        &self.mass_factor
    }

    /// White noise in `R^N_M`: covariance matrix `M⁻¹`.
    pub fn white_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.mass_factor.solve_upper(&standard_normal(self.dim(), rng))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + self.sqrt_apply(&self.white_noise(rng))
    }

    /// Diagonal of the prior covariance matrix `(αK+βM)⁻¹ M (αK+βM)⁻¹`.
    pub fn pointwise_variance(&self) -> DVector<f64> {
        let n = self.dim();
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let col = self.elliptic_factor.solve(&e);
                self.inner(&col, &col)
            }),
        )
    }
}

/// Candidate sensor locations snapped to mesh nodes.
#[derive(Debug, Clone)]
pub struct SensorGrid {
    pub coords: Vec<[f64; 2]>,
    pub nodes: Vec<usize>,
    pub max_snap_distance: f64,
}

impl SensorGrid {
    /// `rows × cols` interior grid at `(i/(cols+1), j/(rows+1))`, numbered
    /// row-major from the bottom-left.
    pub fn uniform(mesh: &Mesh, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("sensor grid must have at least one row and column"));
        }
        let mut coords = Vec::with_capacity(rows * cols);
        for j in 1..=rows {
            for i in 1..=cols {
                coords.push([i as f64 / (cols + 1) as f64, j as f64 / (rows + 1) as f64]);
            }
        }
        Self::from_coords(mesh, coords)
    }

    pub fn from_coords(mesh: &Mesh, coords: Vec<[f64; 2]>) -> Result<Self> {
        let mut nodes = Vec::with_capacity(coords.len());
        let mut max_snap_distance: f64 = 0.0;
        for p in &coords {
            let (k, d) = mesh.nearest_node(*p);
            if nodes.contains(&k) {
                return Err(invalid(format!(
                    "two sensors snap to mesh node {k}; refine the mesh"
                )));
            }
            max_snap_distance = max_snap_distance.max(d);
            nodes.push(k);
        }
        Ok(Self {
            coords,
            nodes,
            max_snap_distance,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `F m = B̂ S m`, `b = B̂ s`.
#[derive(Debug)]
pub struct ObservationOperator {
    pub sensors: SensorGrid,
    pub offset: DVector<f64>,
    steady: Arc<SteadyModel>,
}

impl ObservationOperator {
    pub fn new(sensors: SensorGrid, steady: Arc<SteadyModel>) -> Self {
        let offset = DVector::from_iterator(
            sensors.len(),
            sensors.nodes.iter().map(|&k| steady.offset()[k]),
        );
        Self {
            sensors,
            offset,
            steady,
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn dim(&self) -> usize {
        self.steady.dim()
    }

    fn select(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.num_sensors(), self.sensors.nodes.iter().map(|&k| u[k]))
    }

    pub fn apply_f(&self, m: &DVector<f64>) -> DVector<f64> {
        self.select(&self.steady.apply_s(m))
    }

    /// `F* y = M⁻¹ Fᵀ y = A_st⁻¹ B̂ᵀ y`.
    pub fn apply_f_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.num_sensors());
        let mut v = DVector::zeros(self.dim());
        for (&k, &val) in self.sensors.nodes.iter().zip(y.iter()) {
            v[k] += val;
        }
        self.steady.solve_system(&v)
    }

    /// Noise-free observation of the steady state, `F m + b`.
    pub fn observe(&self, m: &DVector<f64>) -> DVector<f64> {
        self.apply_f(m) + &self.offset
    }
}

/// Binary sensor weights with the noise standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl Design {
    pub fn new(weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid(format!("noise level must be positive, got {sigma}")));
        }
        if let Some(bad) = weights.iter().find(|&&w| w != 0.0 && w != 1.0) {
            return Err(invalid(format!("design weights must be 0 or 1, found {bad}")));
        }
        Ok(Self { weights, sigma })
    }

    pub fn empty(n: usize, sigma: f64) -> Self {
        Self {
            weights: vec![0.0; n],
            sigma,
        }
    }

    pub fn full(n: usize, sigma: f64) -> Self {
        Self {
            weights: vec![1.0; n],
            sigma,
        }
    }

    pub fn from_indices(n: usize, active: &[usize], sigma: f64) -> Result<Self> {
        let mut weights = vec![0.0; n];
        for &i in active {
            if i >= n {
                return Err(invalid(format!("sensor index {i} out of range (n_s = {n})")));
            }
            weights[i] = 1.0;
        }
        Self::new(weights, sigma)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn active(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    pub fn with_sensor(&self, j: usize) -> Self {
        let mut d = self.clone();
        d.weights[j] = 1.0;
        d
    }

    /// Diagonal of `W_σ = σ⁻² diag(w)`.
    pub fn precision_weights(&self) -> DVector<f64> {
        let s2 = self.sigma * self.sigma;
        DVector::from_iterator(self.len(), self.weights.iter().map(|w| w / s2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovKind {
    Prior,
    PosteriorExact,
    PosteriorFrozen,
    PosteriorSpectral,
}

pub type CovApply = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Gaussian on `R^N_M` with a matrix-free covariance operator.
#[derive(Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: CovApply,
    pub kind: CovKind,
}

impl fmt::Debug for GaussianBelief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianBelief")
            .field("dim", &self.mean.len())
            .field("kind", &self.kind)
            .finish()
    }
}

impl GaussianBelief {
    pub fn apply_cov(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.cov)(v)
    }
}

/// Bayesian linear inverse problem for the source parameter.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub prior: Arc<Prior>,
    pub obs: Arc<ObservationOperator>,
}

#[derive(Clone, Debug)]
pub struct MapEstimate {
    pub m_map: DVector<f64>,
    pub cg_iterations: usize,
}

impl InverseProblem {
    pub fn new(prior: Arc<Prior>, obs: Arc<ObservationOperator>) -> Self {
        Self { prior, obs }
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn num_sensors(&self) -> usize {
        self.obs.num_sensors()
    }

    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.prior.inner(a, b)
    }

    /// `F̃ v = F Γ_pr^{1/2} v`.
    pub fn apply_f_tilde(&self, v: &DVector<f64>) -> DVector<f64> {
        self.obs.apply_f(&self.prior.sqrt_apply(v))
    }

    /// `F̃* y = Γ_pr^{1/2} F* y`.
    pub fn apply_f_tilde_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        self.prior.sqrt_apply(&self.obs.apply_f_adjoint(y))
    }

    /// Prior-preconditioned misfit Hessian `H̃(w) v = F̃* W_σ F̃ v`.
    pub fn misfit_hessian_apply(&self, design: &Design, v: &DVector<f64>) -> DVector<f64> {
        let wy = self.apply_f_tilde(v).component_mul(&design.precision_weights());
        self.apply_f_tilde_adjoint(&wy)
    }

    fn check_design(&self, design: &Design) -> Result<()> {
        if design.len() != self.num_sensors() {
            return Err(invalid(format!(
                "design has {} weights but there are {} candidate sensors",
                design.len(),
                self.num_sensors()
            )));
        }
        Ok(())
    }

    /// Solves `(H̃ + I) x = rhs` in the M-inner product.
    fn solve_shifted_hessian(&self, design: &Design, rhs: &DVector<f64>) -> Result<cg::CgOutcome> {
        cg::solve(
            |v| self.misfit_hessian_apply(design, v) + v,
            |a, b| self.inner(a, b),
            rhs,
            CG_TOLERANCE,
            CG_MAX_ITER,
        )
        .map_err(|e| match e {
            Error::NumericalFailure(msg) => numerical(format!("posterior solve: {msg}")),
            other => other,
        })
    }

    /// MAP point via prior-preconditioned CG. Inactive data entries are ignored.
    pub fn compute_map(&self, design: &Design, y: &DVector<f64>) -> Result<MapEstimate> {
        self.check_design(design)?;
        if y.len() != self.num_sensors() {
            return Err(invalid("data vector has the wrong length"));
        }
        let m_pr = &self.prior.mean;
        if design.count() == 0 {
            return Ok(MapEstimate {
                m_map: m_pr.clone(),
                cg_iterations: 0,
            });
        }
        let resid = y - &self.obs.offset - self.obs.apply_f(m_pr);
        let weighted = resid.component_mul(&design.precision_weights());
        let rhs = self.apply_f_tilde_adjoint(&weighted);
        let out = self.solve_shifted_hessian(design, &rhs)?;
        Ok(MapEstimate {
            m_map: m_pr + self.prior.sqrt_apply(&out.x),
            cg_iterations: out.iterations,
        })
    }

    /// `Γ_post(w) v = Γ_pr^{1/2} (H̃ + I)⁻¹ Γ_pr^{1/2} v`.
    pub fn apply_postcov_exact(&self, design: &Design, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_design(design)?;
        let half = self.prior.sqrt_apply(v);
        if design.count() == 0 {
            return Ok(self.prior.sqrt_apply(&half));
        }
        let out = self.solve_shifted_hessian(design, &half)?;
        Ok(self.prior.sqrt_apply(&out.x))
    }

    pub fn prior_belief(&self) -> GaussianBelief {
        let prior = self.prior.clone();
        GaussianBelief {
            mean: self.prior.mean.clone(),
            cov: Arc::new(move |v| prior.cov_apply(v)),
            kind: CovKind::Prior,
        }
    }

    /// Exact posterior: MAP mean with the CG-backed covariance apply.
    pub fn posterior_exact(&self, design: &Design, y: &DVector<f64>) -> Result<GaussianBelief> {
        let map = self.compute_map(design, y)?;
        let this = self.clone();
        let d = design.clone();
        Ok(GaussianBelief {
            mean: map.m_map,
            cov: Arc::new(move |v| {
                this.apply_postcov_exact(&d, v)
                    .expect("posterior covariance solve failed")
            }),
            kind: CovKind::PosteriorExact,
        })
    }

    /// Noisy data `y = F m_true + b + η` with `σ = δ ‖F m_true + b‖₂ / √n_y`.
    pub fn synthesize_data<R: Rng + ?Sized>(
        &self,
        m_true: &DVector<f64>,
        delta: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, f64)> {
        if !(delta > 0.0) {
            return Err(invalid(format!("noise level delta must be positive, got {delta}")));
        }
        let clean = self.obs.observe(m_true);
        let scale = clean.norm();
        if scale == 0.0 {
            return Err(Error::DegenerateData(
                "noise-free observations vanish; relative noise level is undefined".into(),
            ));
        }
        let sigma = delta / (clean.len() as f64).sqrt() * scale;
        let noise = standard_normal(clean.len(), rng) * sigma;
        Ok((clean + noise, sigma))
    }
}
