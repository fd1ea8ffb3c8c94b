//! End-to-end phases shared by the command-line runner and the acceptance
//! tests: inversion, the offline low-rank stage, greedy design, control and
//! uncertainty quantification.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bayes::Design;
use crate::control::{ControlCache, ControlProblem, NominalControl};
use crate::dense::DenseModel;
use crate::error::Result;
use crate::lowrank::{
    build_frozen_svd, build_spectral_with, nystrom_trace_adaptive, DeflatedTraces, FrozenSvd,
    NystromSketch,
};
use crate::oed::{
    compare_designs, greedy_select, random_designs, Comparison, CriterionKind, CriterionSpec,
    GreedyResult,
};
use crate::problem::{Experiment, Stream};
use crate::uq::{
    concentration_report, mc_objective_samples, objective_moments, sample_moments,
    ConcentrationReport, ObjectiveMoments,
};

/// Design-invariant traces of the prior. The deflated parts are what the
/// estimator actually measures; the full traces add the exact contribution
/// of the factorization basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorTraces {
    /// `tr(A Γ_pr A*)`.
    pub goal: f64,
    /// `tr[(A Γ_pr A*)²]`.
    pub goal_sq: f64,
    /// `tr(Γ_pr)`.
    pub prior: f64,
    pub deflated: DeflatedTraces,
    pub goal_probes: usize,
    pub prior_probes: usize,
    pub goal_rel_error: f64,
    pub prior_rel_error: f64,
}

impl PriorTraces {
    fn assemble(frozen: &FrozenSvd, deflated: DeflatedTraces) -> Self {
        let mut f = frozen.clone();
        f.deflated = Some(deflated);
        Self {
            goal: f.prior_goal_trace().unwrap_or(f64::NAN),
            goal_sq: f.prior_goal_trace_sq().unwrap_or(f64::NAN),
            prior: f.prior_trace().unwrap_or(f64::NAN),
            deflated,
            goal_probes: 0,
            prior_probes: 0,
            goal_rel_error: 0.0,
            prior_rel_error: 0.0,
        }
    }

    /// Exact deflated traces from dense operators.
    pub fn from_dense(d: &DenseModel, frozen: &FrozenSvd) -> Self {
        let n = d.dim();
        let v = &frozen.v_hat;
        let proj = DMatrix::identity(n, n) - v * (v.transpose() * &d.mass);
        let half = &d.prior_sqrt * &proj * &d.prior_sqrt;
        let goal = d.goal_cov(&half);
        let deflated = DeflatedTraces {
            goal: goal.trace(),
            goal_sq: (&goal * &goal).trace(),
            prior: half.trace(),
        };
        Self::assemble(frozen, deflated)
    }
}

/// Randomized estimates of the deflated prior traces.
pub fn estimate_prior_traces(
    exp: &Experiment,
    frozen: &FrozenSvd,
) -> Result<(PriorTraces, NystromSketch, NystromSketch)> {
    let cfg = &exp.config;
    let ip = &exp.ip;
    let map = &exp.map;
    let prior = &ip.prior;
    let mass = &prior.mass;
    let n = ip.dim();
    let deflate = |v: &DVector<f64>| prior.sqrt_apply(&frozen.project_out(mass, &prior.sqrt_apply(v)));
    let mut rng = exp.rng(Stream::Trace);
    let goal = nystrom_trace_adaptive(
        |v| map.apply_a(&deflate(&map.apply_a_adjoint(v))),
        mass,
        cfg.trace_probes,
        cfg.trace_tolerance,
        n,
        || prior.white_noise(&mut rng),
    )?;
    let prior_sketch = nystrom_trace_adaptive(
        deflate,
        mass,
        cfg.trace_probes,
        cfg.trace_tolerance,
        n,
        || prior.white_noise(&mut rng),
    )?;
    let deflated = DeflatedTraces {
        goal: goal.trace,
        goal_sq: goal.trace_sq,
        prior: prior_sketch.trace,
    };
    let traces = PriorTraces {
        goal_probes: goal.num_probes(),
        prior_probes: prior_sketch.num_probes(),
        goal_rel_error: goal.relative_error(),
        prior_rel_error: prior_sketch.relative_error(),
        ..PriorTraces::assemble(frozen, deflated)
    };
    Ok((traces, goal, prior_sketch))
}

#[derive(Clone, Debug)]
pub struct Offline {
    pub frozen: Arc<FrozenSvd>,
    pub traces: PriorTraces,
    /// PDE solves spent building the factorization and the traces.
    pub solves: usize,
}

/// Frozen factorization plus prior traces; exact traces when a dense model
/// is supplied.
pub fn offline_stage(exp: &Experiment, dense: Option<&DenseModel>) -> Result<Offline> {
    let before = exp.counter.get();
    let cfg = &exp.config;
    let mut frozen = build_frozen_svd(
        &exp.ip,
        exp.map.as_ref(),
        cfg.k_f,
        cfg.oversampling,
        &mut exp.rng(Stream::Sketch),
    )?;
    let traces = match dense {
        Some(d) => PriorTraces::from_dense(d, &frozen),
        None => estimate_prior_traces(exp, &frozen)?.0,
    };
    frozen.deflated = Some(traces.deflated);
    Ok(Offline {
        frozen: Arc::new(frozen),
        traces,
        solves: exp.counter.get() - before,
    })
}

pub fn criterion(kind: CriterionKind, offline: &Offline, exp: &Experiment) -> CriterionSpec {
    let f = offline.frozen.clone();
    match kind {
        CriterionKind::ClassicalA => CriterionSpec::new(
            kind,
            Arc::new(move |d: &Design| f.classical_minus(d)),
            Some(offline.traces.prior),
        ),
        CriterionKind::CoedFrozen => CriterionSpec::new(
            kind,
            Arc::new(move |d: &Design| f.coed_minus(d)),
            Some(offline.traces.goal),
        ),
        CriterionKind::CoedSpectral => {
            let ip = exp.ip.clone();
            let map = exp.map.clone();
            let seed = exp.seed_for(Stream::Spectral);
            let method = exp.config.spectral_method;
            let k_h_max = exp.config.k_h;
            CriterionSpec::new(
                kind,
                Arc::new(move |d: &Design| {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let k_h = d.count().min(k_h_max).max(1);
                    let spec = build_spectral_with(method, &ip, d, k_h, &mut rng)?;
                    Ok(crate::lowrank::eval_coed_spectral(&spec, map.as_ref(), &ip.prior))
                }),
                Some(offline.traces.goal),
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvertOutput {
    pub m_true: DVector<f64>,
    pub y: DVector<f64>,
    pub sigma: f64,
    pub m_map: DVector<f64>,
    pub prior_variance: DVector<f64>,
    pub posterior_variance: DVector<f64>,
    pub cg_iterations: usize,
}

/// Inversion with every candidate sensor. The posterior variance uses the
/// full-rank spectral decomposition of the misfit Hessian, which is exact
/// because its rank is at most the number of sensors.
pub fn run_invert(exp: &Experiment, dense: Option<&DenseModel>) -> Result<InvertOutput> {
    let (y, sigma) = exp.synthesize()?;
    let design = exp.full_design(sigma);
    let (m_map, cg_iterations, prior_variance, posterior_variance) = match dense {
        Some(d) => {
            let m_map = d.map_point(&design, &y)?;
            let post = d.posterior_cov(&design)?;
            let pv = d.covariance_matrix(&d.prior_cov).diagonal();
            let qv = d.covariance_matrix(&post).diagonal();
            (m_map, 0, pv, qv)
        }
        None => {
            let est = exp.ip.compute_map(&design, &y)?;
            let prior_var = exp.ip.prior.pointwise_variance();
            let spec = build_spectral_with(
                exp.config.spectral_method,
                &exp.ip,
                &design,
                design.count(),
                &mut exp.rng(Stream::Spectral),
            )?;
            let half = crate::linalg::map_columns(&spec.v_h, |v| exp.ip.prior.sqrt_apply(v));
            let mut post_var = prior_var.clone();
            for (j, dj) in spec.d.iter().enumerate() {
                for i in 0..post_var.len() {
                    post_var[i] -= dj * half[(i, j)] * half[(i, j)];
                }
            }
            (est.m_map, est.cg_iterations, prior_var, post_var)
        }
    };
    Ok(InvertOutput {
        m_true: exp.m_true.clone(),
        y,
        sigma,
        m_map,
        prior_variance,
        posterior_variance,
        cg_iterations,
    })
}

#[derive(Clone, Debug)]
pub struct OedOutput {
    pub offline: Offline,
    pub classical: GreedyResult,
    pub coed: GreedyResult,
    pub random: Vec<Design>,
    pub comparison: Comparison,
    /// PDE solves performed by the two greedy runs.
    pub greedy_solves: usize,
    /// Exact `tr(Γ_post)` and `tr(AΓ_postA*)` of the two designs (dense mode).
    pub exact_values: Option<[[f64; 2]; 2]>,
}

pub fn run_oed(exp: &Experiment, sigma: f64, dense: Option<&DenseModel>) -> Result<OedOutput> {
    let offline = offline_stage(exp, dense)?;
    let n_s = exp.num_sensors();
    let k = exp.config.oed_k;
    let classical_c = criterion(CriterionKind::ClassicalA, &offline, exp);
    let coed_c = criterion(exp.config.oed_criterion, &offline, exp);
    let before = exp.counter.get();
    let classical = greedy_select(&classical_c, k, n_s, sigma)?;
    let coed = greedy_select(&coed_c, k, n_s, sigma)?;
    let greedy_solves = exp.counter.get() - before;
    let random = random_designs(
        exp.config.random_samples,
        k,
        n_s,
        sigma,
        &mut exp.rng(Stream::RandomDesigns),
    )?;
    let report_coed = criterion(CriterionKind::CoedFrozen, &offline, exp);
    let comparison = compare_designs(
        &[
            ("classical".to_string(), classical.design.clone()),
            ("coed".to_string(), coed.design.clone()),
        ],
        &[classical_c, report_coed],
        &random,
    )?;
    let exact_values = match dense {
        Some(d) => {
            let row = |des: &Design| -> Result<[f64; 2]> {
                let post = d.posterior_cov(des)?;
                Ok([post.trace(), d.goal_cov(&post).trace()])
            };
            Some([row(&classical.design)?, row(&coed.design)?])
        }
        None => None,
    };
    Ok(OedOutput {
        offline,
        classical,
        coed,
        random,
        comparison,
        greedy_solves,
        exact_values,
    })
}

#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub design: Design,
    pub m_map: DVector<f64>,
    pub nominal: NominalControl,
    pub initial_state: DVector<f64>,
    pub terminal_state: DVector<f64>,
    pub target: DVector<f64>,
    /// `Φ*_ctrl(m_MAP)` under the nominal control.
    pub objective_at_map: f64,
    /// `Φ*_ctrl(m_true)` under the nominal control.
    pub objective_at_true: f64,
    pub improvement: f64,
}

/// Nominal control from the MAP point of `design`.
pub fn run_control(exp: &Experiment, design: &Design, y: &DVector<f64>) -> Result<ControlOutput> {
    let problem = exp.control_problem()?;
    let m_map = exp.ip.compute_map(design, y)?.m_map;
    let nominal = problem.solve_optimal_control(&m_map)?;
    let terminal_state = exp.map.terminal_state(&m_map, &nominal.z_star);
    let initial_state = exp.map.steady().solve_steady(&m_map)?;
    let objective_at_true = problem.control_objective(&exp.m_true, &nominal.z_star)?;
    let improvement = problem.improvement(&m_map, &nominal.z_star)?;
    Ok(ControlOutput {
        design: design.clone(),
        objective_at_map: nominal.objective_at_source,
        m_map,
        nominal,
        initial_state,
        terminal_state,
        target: problem.target.clone(),
        objective_at_true,
        improvement,
    })
}

/// Everything needed to evaluate the objective moments for many designs.
pub struct UqContext<'a> {
    pub exp: &'a Experiment,
    pub offline: &'a Offline,
    pub problem: ControlProblem,
    pub cache: ControlCache,
    pub y: &'a DVector<f64>,
    pub dense: Option<&'a DenseModel>,
}

#[derive(Clone, Debug)]
pub struct DesignMoments {
    pub moments: ObjectiveMoments,
    pub m_map: DVector<f64>,
    pub z_star: DVector<f64>,
    /// `A m_MAP + B z* + q − ū`.
    pub residual: DVector<f64>,
}

impl<'a> UqContext<'a> {
    pub fn new(
        exp: &'a Experiment,
        offline: &'a Offline,
        y: &'a DVector<f64>,
        dense: Option<&'a DenseModel>,
    ) -> Result<Self> {
        let problem = exp.control_problem()?;
        let cache = problem.precompute()?;
        Ok(Self {
            exp,
            offline,
            problem,
            cache,
            y,
            dense,
        })
    }

    fn mass(&self) -> &crate::linalg::CsrMatrix {
        &self.exp.ip.prior.mass
    }

    /// `A Γ_post A* v` with the frozen posterior.
    fn goal_post_apply(&self, design: &Design, v: &DVector<f64>) -> Result<DVector<f64>> {
        let map = &self.exp.map;
        let inner = crate::lowrank::apply_postcov_frozen(
            &self.offline.frozen,
            &self.exp.ip.prior,
            design,
            &map.apply_a_adjoint(v),
        )?;
        Ok(map.apply_a(&inner))
    }

    pub fn evaluate(&self, design: &Design) -> Result<DesignMoments> {
        let map = &self.exp.map;
        if let Some(d) = self.dense {
            let m_map = d.map_point(design, self.y)?;
            let am = &d.goal * &m_map;
            let z = self.cache.solve(&(&self.problem.target - &d.goal_offset - &am));
            let r = am + &d.control * &z + &d.goal_offset - &self.problem.target;
            let gp = d.goal_cov(&d.posterior_cov(design)?);
            let mr = &d.mass * &r;
            let moments = objective_moments(
                gp.trace(),
                (&gp * &gp).trace(),
                0.5 * r.dot(&mr),
                mr.dot(&(&gp * &r)),
            )?;
            return Ok(DesignMoments {
                moments,
                m_map,
                z_star: z,
                residual: r,
            });
        }
        let frozen = &self.offline.frozen;
        let m_map = self.exp.ip.compute_map(design, self.y)?.m_map;
        let am = map.apply_a(&m_map);
        let z = self.cache.solve(&(&self.problem.target - map.offset() - &am));
        let r = am + self.cache.apply_b(&z) + map.offset() - &self.problem.target;
        let psi = frozen.goal_posterior_trace(design)?;
        let tr_sq = frozen.goal_posterior_trace_sq(design)?;
        let mr = self.mass().mul_vec(&r);
        let weighted = mr.dot(&self.goal_post_apply(design, &r)?);
        let moments = objective_moments(psi, tr_sq, 0.5 * r.dot(&mr), weighted)?;
        Ok(DesignMoments {
            moments,
            m_map,
            z_star: z,
            residual: r,
        })
    }

    /// Cholesky factor of the goal covariance matrix `A Γ_post A* M⁻¹`
    /// (dense mode only).
    pub fn goal_sampler(&self, design: &Design) -> Result<Option<DMatrix<f64>>> {
        match self.dense {
            Some(d) => {
                let gp = d.goal_cov(&d.posterior_cov(design)?);
                Ok(Some(d.sampler(&gp)?))
            }
            None => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McCheck {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_rel_error: f64,
    pub variance_rel_error: f64,
    pub tau_grid: Vec<f64>,
    pub empirical_tail: Vec<f64>,
    pub bound: Vec<f64>,
    /// `(δ, radius, empirical coverage)`.
    pub coverage: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct UqRow {
    pub label: String,
    pub moments: ObjectiveMoments,
}

#[derive(Clone, Debug)]
pub struct UqOutput {
    pub rows: Vec<UqRow>,
    pub random_moments: Vec<ObjectiveMoments>,
    pub concentration: ConcentrationReport,
    pub mc: Option<McCheck>,
}

pub const UQ_DELTAS: [f64; 2] = [0.1, 0.01];

/// `count` evenly spaced deviations from `0` to `max`.
pub fn tau_grid(max: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| max * i as f64 / (count - 1) as f64).collect()
}

/// Monte-Carlo check of the moments, the tail bound and the radii.
pub fn monte_carlo_check(
    ctx: &UqContext<'_>,
    design: &Design,
    moments: &ObjectiveMoments,
    residual: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<Option<McCheck>> {
    let Some(chol) = ctx.goal_sampler(design)? else {
        return Ok(None);
    };
    let values = mc_objective_samples(ctx.mass(), residual, &chol, samples, seed);
    let (mean, variance) = sample_moments(&values);
    let sd = moments.variance.sqrt();
    let taus = tau_grid(6.0 * sd.max(moments.psi_ca), 20);
    let deviations: Vec<f64> = values.iter().map(|v| (v - moments.mean).abs()).collect();
    let frac = |t: f64| deviations.iter().filter(|&&d| d >= t).count() as f64 / samples as f64;
    let empirical_tail = taus.iter().map(|&t| frac(t)).collect();
    let bound = taus
        .iter()
        .map(|&t| crate::uq::concentration_bound(moments, t))
        .collect::<Result<_>>()?;
    let coverage = UQ_DELTAS
        .iter()
        .map(|&delta| {
            let r = crate::uq::confidence_radius(moments, delta)?;
            Ok((delta, r, 1.0 - frac(r)))
        })
        .collect::<Result<_>>()?;
    Ok(Some(McCheck {
        samples,
        mean,
        variance,
        mean_rel_error: (mean - moments.mean).abs() / moments.mean.abs(),
        variance_rel_error: (variance - moments.variance).abs() / moments.variance.abs(),
        tau_grid: taus,
        empirical_tail,
        bound,
        coverage,
    }))
}

pub fn run_uq(
    ctx: &UqContext<'_>,
    designs: &[(String, Design)],
    random: &[Design],
    mc_samples: usize,
) -> Result<UqOutput> {
    use rayon::prelude::*;
    let evaluated = designs
        .iter()
        .map(|(label, d)| ctx.evaluate(d).map(|m| (label.clone(), d.clone(), m)))
        .collect::<Result<Vec<_>>>()?;
    let random_moments = random
        .par_iter()
        .map(|d| ctx.evaluate(d).map(|m| m.moments))
        .collect::<Result<Vec<_>>>()?;
    let (_, first_design, first) = evaluated
        .first()
        .ok_or_else(|| crate::error::invalid("uq needs at least one design"))?;
    let sd = first.moments.variance.sqrt();
    let taus = tau_grid(6.0 * sd.max(first.moments.psi_ca), 20);
    let concentration = concentration_report(&first.moments, &taus, &UQ_DELTAS)?;
    let mc = if mc_samples > 0 {
        monte_carlo_check(
            ctx,
            first_design,
            &first.moments,
            &first.residual,
            mc_samples,
            ctx.exp.seed_for(Stream::Mc),
        )?
    } else {
        None
    };
    Ok(UqOutput {
        rows: evaluated
            .into_iter()
            .map(|(label, _, m)| UqRow {
                label,
                moments: m.moments,
            })
            .collect(),
        random_moments,
        concentration,
        mc,
    })
}
