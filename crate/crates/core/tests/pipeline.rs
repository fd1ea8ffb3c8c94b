mod common;

use std::sync::OnceLock;

use coed::bayes::Design;
use coed::oed::CriterionKind;
use coed::pipeline::{run_control, run_invert, run_oed, run_uq, UqContext};
use coed::problem::Experiment;
use coed::uq::quad_moments;
use common::*;
use nalgebra::{DMatrix, DVector};

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| Fixture::new(small_config()))
}

#[test]
fn full_data_inversion_reduces_variance_everywhere() {
    let exp = Experiment::build(small_config()).unwrap();
    let out = run_invert(&exp, None).unwrap();
    assert_eq!(out.m_map.len(), exp.ip.dim());
    for (post, prior) in out.posterior_variance.iter().zip(&out.prior_variance) {
        assert!(*post > 0.0 && post <= prior, "{post} vs {prior}");
    }
    let fx = fixture();
    let dense = run_invert(&fx.exp, Some(&fx.dense)).unwrap();
    let err = (&dense.posterior_variance - &out.posterior_variance).amax();
    assert!(err <= 1e-6 * dense.posterior_variance.amax(), "{err:e}");
    let e = (&dense.m_map - &out.m_map).norm() / dense.m_map.norm();
    // CG stops at a 1e-10 residual on a system with condition number ~1e6.
    assert!(e <= 1e-5, "{e:e} after {} CG iterations", out.cg_iterations);
}

#[test]
fn seed_changes_data_but_not_the_discretization() {
    let a = Experiment::build(small_config()).unwrap();
    let mut c = small_config();
    c.seed += 1;
    let b = Experiment::build(c).unwrap();
    assert_eq!(a.mesh.nodes, b.mesh.nodes);
    assert_eq!(a.m_true, b.m_true);
    assert_eq!(a.map.offset(), b.map.offset());
    assert_ne!(a.synthesize().unwrap().0, b.synthesize().unwrap().0);
}

#[test]
fn full_budget_gives_identical_designs() {
    let mut c = full_rank_config();
    c.oed_k = 81;
    c.random_samples = 5;
    let exp = Experiment::build(c).unwrap();
    let (_, sigma) = exp.synthesize().unwrap();
    let out = run_oed(&exp, sigma, None).unwrap();
    assert_eq!(out.classical.design.count(), 81);
    assert_eq!(out.classical.selected.len(), 81);
    assert_eq!(out.classical.design.weights, out.coed.design.weights);
    assert!(out.classical.evaluations <= 81 * 81);
    assert_eq!(out.greedy_solves, 0);
}

#[test]
fn oed_reports_exact_values_in_dense_mode() {
    let fx = fixture();
    let mut c = small_config();
    c.random_samples = 20;
    let exp = Experiment::build(c).unwrap();
    let out = run_oed(&exp, fx.sigma, Some(&fx.dense)).unwrap();
    let exact = out.exact_values.unwrap();
    for (row, design) in exact.iter().zip([&out.classical.design, &out.coed.design]) {
        assert!(rel(row[0], fx.dense.trace_cov(design).unwrap()) < 1e-12);
        assert!(rel(row[1], fx.dense.goal_trace(design).unwrap()) < 1e-12);
    }
    assert_eq!(out.random.len(), 20);
    assert_eq!(out.comparison.random_values[0].len(), 20);
}

#[test]
fn zero_control_objective_is_the_plain_terminal_misfit() {
    let fx = fixture();
    let exp = &fx.exp;
    let m = &exp.m_true;
    let zero = DVector::zeros(exp.map.control_dim());
    let problem = exp.control_problem().unwrap();
    let u = exp.map.terminal_state(m, &zero);
    let e = &u - &problem.target;
    let want = 0.5 * e.dot(&exp.ip.prior.mass.mul_vec(&e));
    assert!(rel(problem.control_objective(m, &zero).unwrap(), want) < 1e-12);
    // The terminal state of the zero control as target is reached exactly.
    let own = coed::control::ControlProblem::new(exp.map.clone(), u, exp.config.beta_reg).unwrap();
    assert!(own.control_objective(m, &zero).unwrap() < 1e-20);
}

#[test]
fn tracking_misfit_grows_with_regularization() {
    let fx = fixture();
    let design = fx.greedy(CriterionKind::CoedFrozen, 13);
    let mut last = 0.0;
    for beta in [1e-7, 1e-6, 1e-5, 1e-4, 1e-3] {
        let mut c = small_config();
        c.beta_reg = beta;
        let exp = Experiment::build(c).unwrap();
        let out = run_control(&exp, &design, &fx.y).unwrap();
        assert!(out.objective_at_map >= last * (1.0 - 1e-10), "beta {beta}: {} < {last}", out.objective_at_map);
        last = out.objective_at_map;
    }
}

#[test]
fn empty_design_gives_prior_predictive_moments() {
    let fx = fixture();
    let empty = Design::empty(81, fx.sigma);
    let prior_goal = fx.dense.goal_cov(&fx.dense.prior_cov);
    let frozen = UqContext::new(&fx.exp, &fx.offline, &fx.y, None).unwrap();
    let dense = UqContext::new(&fx.exp, &fx.offline, &fx.y, Some(&fx.dense)).unwrap();
    for ctx in [&frozen, &dense] {
        let m = ctx.evaluate(&empty).unwrap();
        assert!(m.m_map.amax() < 1e-12);
        assert!(rel(m.moments.psi_ca, prior_goal.trace()) < 1e-6);
        assert!(rel(m.moments.trace_sq_term, (&prior_goal * &prior_goal).trace()) < 1e-6);
    }
}

#[test]
fn closed_form_moments_follow_the_quadratic_form_lemma() {
    let fx = fixture();
    let design = fx.greedy(CriterionKind::CoedFrozen, 13);
    let ctx = UqContext::new(&fx.exp, &fx.offline, &fx.y, Some(&fx.dense)).unwrap();
    let m = ctx.evaluate(&design).unwrap();
    let mo = m.moments;
    assert_eq!(mo.mean, 0.5 * mo.psi_ca + mo.objective_at_map);
    let d = &fx.dense;
    let sigma = d.covariance_matrix(&d.goal_cov(&d.posterior_cov(&design).unwrap()));
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let n: DMatrix<f64> = &d.mass * 0.5;
    let (mean, var) = quad_moments(&n, &sigma, &m.residual).unwrap();
    assert!(rel(mean, mo.mean) < 1e-8, "{mean:e} vs {:e}", mo.mean);
    assert!(rel(var, mo.variance) < 1e-8, "{var:e} vs {:e}", mo.variance);
}

#[test]
fn uq_stage_reports_every_design_and_a_consistent_report() {
    let fx = Fixture::new(reachable(small_config()));
    let design = fx.greedy(CriterionKind::CoedFrozen, 13);
    let ctx = UqContext::new(&fx.exp, &fx.offline, &fx.y, Some(&fx.dense)).unwrap();
    let random = coed::oed::random_designs(10, 13, 81, fx.sigma, &mut fx.exp.rng(coed::problem::Stream::RandomDesigns)).unwrap();
    let out = run_uq(&ctx, &[("coed".into(), design)], &random, 2000).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.random_moments.len(), 10);
    let rep = &out.concentration;
    assert_eq!(rep.tau_grid.len(), 20);
    assert!(rep.bound_values.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    let mc = out.mc.unwrap();
    assert_eq!(mc.samples, 2000);
    assert!(mc.mean_rel_error < 0.05);
}
