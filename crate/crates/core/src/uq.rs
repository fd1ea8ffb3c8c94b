//! Posterior moments and concentration of the control objective, Gaussian
//! quadratic-form moments and tail bounds, and Monte-Carlo checks.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bayes::{standard_normal, Design, InverseProblem};
use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::{pairwise_sum, symmetrize, trace_of_product, CsrMatrix};
use crate::lowrank::GoalOperator;

/// Hanson-Wright constant.
pub const HW_CONSTANT: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveMoments {
    pub mean: f64,
    pub variance: f64,
    /// `tr[(A Γ_post A*)²]`.
    pub trace_sq_term: f64,
    /// `‖r‖²_{M A Γ_post A*}` with `r = A m_MAP + B z* + q − ū`.
    pub weighted_norm_term: f64,
    /// `tr(A Γ_post A*)`.
    pub psi_ca: f64,
    /// `Φ*_ctrl(m_MAP) = ½‖r‖²_M`.
    pub objective_at_map: f64,
}

/// Closed-form posterior mean and variance of `Φ*_ctrl`.
pub fn objective_moments(
    psi_ca: f64,
    trace_sq: f64,
    objective_at_map: f64,
    weighted_norm: f64,
) -> Result<ObjectiveMoments> {
    let scale = trace_sq.abs() + weighted_norm.abs() + f64::MIN_POSITIVE;
    let variance = 0.5 * trace_sq + weighted_norm;
    if variance < -1e-10 * scale || !variance.is_finite() {
        return Err(numerical(format!("objective variance is negative ({variance:e})")));
    }
    Ok(ObjectiveMoments {
        mean: 0.5 * psi_ca + objective_at_map,
        variance: variance.max(0.0),
        trace_sq_term: trace_sq,
        weighted_norm_term: weighted_norm.max(0.0),
        psi_ca,
        objective_at_map,
    })
}

/// `4 exp[−⅛ min{τ/Ψ, τ²/Ψ², τ²/C²}]`, where a vanishing denominator drops
/// its term.
pub fn concentration_bound(moments: &ObjectiveMoments, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(invalid(format!("tau must be nonnegative, got {tau}")));
    }
    let psi = moments.psi_ca;
    let c2 = moments.weighted_norm_term;
    let mut terms = Vec::with_capacity(3);
    if psi > 0.0 {
        terms.push(tau / psi);
        terms.push(tau * tau / (psi * psi));
    }
    if c2 > 0.0 {
        terms.push(tau * tau / c2);
    }
    Ok(tail_from_terms(tau, &terms))
}

fn tail_from_terms(t: f64, terms: &[f64]) -> f64 {
    if t == 0.0 {
        return 4.0;
    }
    let m = terms.iter().cloned().fold(f64::INFINITY, f64::min);
    (4.0 * (-HW_CONSTANT * m).exp()).min(4.0)
}

/// Deviation radius that holds with probability at least `1 − δ`.
pub fn confidence_radius(moments: &ObjectiveMoments, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let s = (8.0 * (4.0 / delta).ln()).sqrt();
    let psi = moments.psi_ca;
    let c = moments.weighted_norm_term.sqrt();
    Ok(s * (s * psi).max(psi).max(c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationReport {
    pub tau_grid: Vec<f64>,
    pub bound_values: Vec<f64>,
    pub c: f64,
    pub radii: Vec<(f64, f64)>,
}

pub fn concentration_report(
    moments: &ObjectiveMoments,
    tau_grid: &[f64],
    deltas: &[f64],
) -> Result<ConcentrationReport> {
    Ok(ConcentrationReport {
        tau_grid: tau_grid.to_vec(),
        bound_values: tau_grid
            .iter()
            .map(|&t| concentration_bound(moments, t))
            .collect::<Result<_>>()?,
        c: moments.weighted_norm_term.sqrt(),
        radii: deltas
            .iter()
            .map(|&d| confidence_radius(moments, d).map(|r| (d, r)))
            .collect::<Result<_>>()?,
    })
}

fn check_psd(name: &str, a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::ContractViolation(format!("{name} is not square")));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-10 * scale {
        return Err(Error::ContractViolation(format!("{name} is not symmetric")));
    }
    let min_eig = symmetrize(a).symmetric_eigenvalues().min();
    if min_eig < -1e-10 * scale {
        return Err(Error::ContractViolation(format!(
            "{name} is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Mean and variance of `xᵀ N x` for `x ~ N(μ, Σ)`.
pub fn quad_moments(n: &DMatrix<f64>, sigma: &DMatrix<f64>, mu: &DVector<f64>) -> Result<(f64, f64)> {
    check_psd("N", n)?;
    check_psd("Sigma", sigma)?;
    if n.nrows() != sigma.nrows() || mu.len() != n.nrows() {
        return Err(invalid("quadratic form dimensions disagree"));
    }
    let ns = n * sigma;
    let nmu = n * mu;
    let mean = ns.trace() + mu.dot(&nmu);
    let variance = 2.0 * trace_of_product(&ns, &ns) + 4.0 * nmu.dot(&(sigma * &nmu));
    Ok((mean, variance))
}

/// Tail bound `P(|xᵀNx − E| ≥ t)` for `x ~ N(μ, Σ)`.
pub fn quad_concentration(
    n: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid(format!("t must be nonnegative, got {t}")));
    }
    let sn = sigma * n;
    let a = trace_of_product(&sn, &sn);
    let nmu = n * mu;
    let c = nmu.dot(&(sigma * &nmu));
    let mut terms = Vec::with_capacity(3);
    if a > 0.0 {
        terms.push(t / a.sqrt());
        terms.push(t * t / a);
    }
    if c > 0.0 {
        terms.push(t * t / c);
    }
    Ok(tail_from_terms(t, &terms))
}

/// Sample mean and unbiased variance with pairwise summation.
pub fn sample_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, pairwise_sum(&dev) / (n - 1.0))
}

const CHUNK: usize = 4096;

/// Runs `f` on `n` independent draws in parallel; chunk `c` uses stream `c`
/// of a ChaCha generator seeded with `seed`, so the output is reproducible
/// regardless of thread count.
pub fn parallel_samples<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> T + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(|_| f(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Samples of `½‖r + e‖²_M` with `e ~ N(0, L Lᵀ)`; `r` is the residual of the
/// nominal terminal state and `chol` a factor of the goal covariance matrix.
pub fn mc_objective_samples(
    mass: &CsrMatrix,
    residual: &DVector<f64>,
    chol: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    parallel_samples(n, seed, |rng| {
        let e = residual + chol * standard_normal(chol.ncols(), rng);
        0.5 * e.dot(&mass.mul_vec(&e))
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E_m E_{y|m} ‖A(m_MAP(y) − m)‖²_M`.
pub fn bayes_risk_mc<G: GoalOperator + ?Sized>(
    ip: &InverseProblem,
    goal: &G,
    design: &Design,
    n_outer: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if n_outer < 2 {
        return Err(invalid("need at least two outer samples"));
    }
    let mass = &ip.prior.mass;
    let values = parallel_samples(n_outer, seed, |rng| -> Result<f64> {
        let m = ip.prior.sample(rng);
        let noise = standard_normal(ip.num_sensors(), rng) * design.sigma;
        let y = ip.obs.observe(&m) + noise;
        let m_map = ip.compute_map(design, &y)?.m_map;
        let e = goal.apply(&(m_map - m));
        Ok(e.dot(&mass.mul_vec(&e)))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (mean, var) = sample_moments(&values);
    Ok(RiskEstimate {
        mean,
        std_error: (var / n_outer as f64).sqrt(),
        samples: n_outer,
    })
}
