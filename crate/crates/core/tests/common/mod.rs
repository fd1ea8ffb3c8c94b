//! Fixtures and structural checks shared by the property suite and the
//! acceptance runner.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coed::bayes::{standard_normal, Design};
use coed::config::{ExperimentConfig, TargetSpec};
use coed::dense::DenseModel;
use coed::oed::{greedy_select, CriterionKind};
use coed::pipeline::{criterion, offline_stage, Offline};
use coed::problem::Experiment;
use coed::uq::{parallel_samples, quad_moments, sample_moments};

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Default setup on the 10×10 mesh.
pub fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.mesh_n = 10;
    c
}

/// Full-rank factorization on the 10×10 mesh: 81 sensors, no oversampling.
pub fn full_rank_config() -> ExperimentConfig {
    let mut c = small_config();
    c.k_f = 81;
    c.oversampling = 0;
    c
}

pub fn reachable(mut c: ExperimentConfig) -> ExperimentConfig {
    c.target = TargetSpec::Reachable { z0: 1.0 };
    c
}

/// Small experiment with its dense oracle, data and an exact offline stage.
pub struct Fixture {
    pub exp: Experiment,
    pub dense: DenseModel,
    pub y: DVector<f64>,
    pub sigma: f64,
    pub offline: Offline,
}

impl Fixture {
    pub fn new(config: ExperimentConfig) -> Self {
        let exp = Experiment::build(config).expect("experiment");
        let dense = DenseModel::build(&exp.ip, Some(&exp.map)).expect("dense model");
        let (_, sigma) = exp.synthesize().expect("data");
        let y = exp.uq_data(sigma).expect("data");
        let offline = offline_stage(&exp, Some(&dense)).expect("offline stage");
        Self {
            exp,
            dense,
            y,
            sigma,
            offline,
        }
    }

    pub fn design(&self, idx: &[usize]) -> Design {
        Design::from_indices(self.exp.num_sensors(), idx, self.sigma).unwrap()
    }

    pub fn greedy(&self, kind: CriterionKind, k: usize) -> Design {
        let c = criterion(kind, &self.offline, &self.exp);
        greedy_select(&c, k, self.exp.num_sensors(), self.sigma)
            .expect("greedy")
            .design
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `⟨F m, y⟩ = ⟨m, F* y⟩_M`, `⟨A m, u⟩_M = ⟨m, A* u⟩_M` and
/// `⟨B z, u⟩_M = ⟨z, B* u⟩_Mt` on random vectors.
pub fn check_weighted_adjoints(exp: &Experiment, seed: u64) -> Check {
    let mut r = rng(seed);
    let n = exp.ip.dim();
    let ip = &exp.ip;
    let map = &exp.map;
    let grid = map.grid();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let m = standard_normal(n, &mut r);
        let u = standard_normal(n, &mut r);
        let y = standard_normal(ip.num_sensors(), &mut r);
        let z = standard_normal(grid.steps, &mut r);
        let pairs = [
            (ip.obs.apply_f(&m).dot(&y), ip.inner(&m, &ip.obs.apply_f_adjoint(&y))),
            (map.inner_m(&map.apply_a(&m), &u), map.inner_m(&m, &map.apply_a_adjoint(&u))),
            (map.inner_m(&map.apply_b(&z), &u), grid.inner(&z, &map.apply_b_adjoint(&u))),
        ];
        for (lhs, rhs) in pairs {
            let e = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
            worst = worst.max(e);
        }
    }
    ensure(worst < 1e-10, || format!("adjoint mismatch {worst:.2e}"))?;
    Ok(format!("max adjoint mismatch {worst:.1e}"))
}

/// Adding a sensor never increases either criterion, frozen or dense.
pub fn check_information_monotonicity(fx: &Fixture, seed: u64) -> Check {
    use rand::seq::index::sample;
    let mut r = rng(seed);
    let n_s = fx.exp.num_sensors();
    let frozen = &fx.offline.frozen;
    let mut checked = 0;
    for _ in 0..10 {
        let k = 1 + (sample(&mut r, 20, 1).index(0));
        let idx = sample(&mut r, n_s, k + 1).into_vec();
        let small = fx.design(&idx[..k]);
        let big = fx.design(&idx);
        let pairs = [
            (frozen.goal_posterior_trace(&small).unwrap(), frozen.goal_posterior_trace(&big).unwrap()),
            (frozen.posterior_trace(&small).unwrap(), frozen.posterior_trace(&big).unwrap()),
            (fx.dense.goal_trace(&small).unwrap(), fx.dense.goal_trace(&big).unwrap()),
            (fx.dense.trace_cov(&small).unwrap(), fx.dense.trace_cov(&big).unwrap()),
        ];
        for (a, b) in pairs {
            ensure(b <= a * (1.0 + 1e-10), || format!("criterion grew from {a:.6e} to {b:.6e}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} nested design pairs"))
}

/// Two greedy runs agree and the criterion trace is nonincreasing.
pub fn check_greedy_determinism(fx: &Fixture) -> Check {
    let mut notes = Vec::new();
    for kind in [CriterionKind::ClassicalA, CriterionKind::CoedFrozen] {
        let c = criterion(kind, &fx.offline, &fx.exp);
        let a = greedy_select(&c, 8, fx.exp.num_sensors(), fx.sigma).map_err(|e| e.to_string())?;
        let b = greedy_select(&c, 8, fx.exp.num_sensors(), fx.sigma).map_err(|e| e.to_string())?;
        ensure(a.selected == b.selected, || format!("{} greedy is not deterministic", kind.name()))?;
        ensure(a.criterion_trace.windows(2).all(|w| w[1] <= w[0]), || {
            format!("{} greedy trace increases: {:?}", kind.name(), a.criterion_trace)
        })?;
        notes.push(format!("{} {:?}", kind.name(), a.selected));
    }
    Ok(notes.join("; "))
}

/// Closed-form mean and variance of `(x)ᵀN(x)` with `x ~ N(μ, Σ)` against
/// sampling.
pub fn check_quadratic_form_lemma(seed: u64) -> Check {
    let mut r = rng(seed);
    let d = 6;
    let g = DMatrix::from_column_slice(d, d, standard_normal(d * d, &mut r).as_slice());
    let h = DMatrix::from_column_slice(d, d, standard_normal(d * d, &mut r).as_slice());
    let n = &g * g.transpose() / d as f64;
    let sigma = &h * h.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
    let mu = standard_normal(d, &mut r) * 0.5;
    let (mean, var) = quad_moments(&n, &sigma, &mu).map_err(|e| e.to_string())?;
    let l = sigma.clone().cholesky().ok_or("Σ not SPD")?.l();
    let samples = parallel_samples(400_000, seed, |rng| {
        let x = &mu + &l * standard_normal(d, rng);
        x.dot(&(&n * &x))
    });
    let (m_hat, v_hat) = sample_moments(&samples);
    ensure(rel(m_hat, mean) < 0.01 && rel(v_hat, var) < 0.03, || {
        format!("lemma mean {mean:.4} vs {m_hat:.4}, variance {var:.4} vs {v_hat:.4}")
    })?;
    Ok(format!("mean err {:.1e}, variance err {:.1e}", rel(m_hat, mean), rel(v_hat, var)))
}

/// `|Ψ^{cA} − Ψ^A| / Ψ^A ≤ ‖A*A − I‖` for dense posteriors.
pub fn check_criterion_bound(fx: &Fixture, seed: u64) -> Check {
    use rand::seq::index::sample;
    let d = &fx.dense;
    let l = d.mass.clone().cholesky().ok_or("mass not SPD")?.l();
    let linv = l.clone().try_inverse().ok_or("singular factor")?;
    // A*A in M-symmetric form L⁻¹ AᵀMA L⁻ᵀ.
    let ata = &linv * d.goal.transpose() * &d.mass * &d.goal * linv.transpose();
    let ata = (&ata + ata.transpose()) * 0.5;
    let eig = ata.symmetric_eigen();
    let norm = eig.eigenvalues.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for k in [1, 5, 13, 40, 81] {
        let design = fx.design(&sample(&mut r, 81, k).into_vec());
        let post = d.posterior_cov(&design).map_err(|e| e.to_string())?;
        let psi_a = post.trace();
        let psi_ca = d.goal_cov(&post).trace();
        let ratio = (psi_ca - psi_a).abs() / psi_a;
        ensure(ratio <= norm * (1.0 + 1e-10), || {
            format!("k={k}: ratio {ratio:.4e} exceeds ‖A*A−I‖ = {norm:.4e}")
        })?;
        worst = worst.max(ratio / norm);
    }
    Ok(format!("‖A*A−I‖ = {norm:.3}, max ratio/bound {worst:.3}"))
}
