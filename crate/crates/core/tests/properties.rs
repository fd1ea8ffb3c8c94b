mod common;

use std::sync::OnceLock;

use coed::bayes::{standard_normal, Design};
use coed::lowrank::apply_postcov_frozen;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| Fixture::new(full_rank_config()))
}

fn pass(c: Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn weighted_adjoints_hold() {
    pass(check_weighted_adjoints(&fixture().exp, 11));
}

#[test]
fn more_sensors_never_hurt() {
    pass(check_information_monotonicity(fixture(), 12));
}

#[test]
fn greedy_is_deterministic_and_monotone() {
    pass(check_greedy_determinism(fixture()));
}

#[test]
fn quadratic_form_moments_match_sampling() {
    pass(check_quadratic_form_lemma(13));
}

#[test]
fn goal_criterion_gap_is_bounded_by_operator_gap() {
    pass(check_criterion_bound(fixture(), 14));
}

fn design_from_mask(mask: &[bool], sigma: f64) -> Design {
    Design::new(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), sigma).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoints_hold_for_any_seed(seed in any::<u64>()) {
        prop_assert!(check_weighted_adjoints(&fixture().exp, seed).is_ok());
    }

    #[test]
    fn frozen_posterior_is_between_zero_and_prior(mask in prop::collection::vec(any::<bool>(), 81), seed in any::<u64>()) {
        let fx = fixture();
        let design = design_from_mask(&mask, fx.sigma);
        let prior = &fx.exp.ip.prior;
        let v = standard_normal(prior.dim(), &mut ChaCha8Rng::seed_from_u64(seed));
        let post = apply_postcov_frozen(&fx.offline.frozen, prior, &design, &v).unwrap();
        let q_post = prior.inner(&v, &post);
        let q_prior = prior.inner(&v, &prior.cov_apply(&v));
        prop_assert!(q_post >= -1e-12 * q_prior);
        prop_assert!(q_post <= q_prior * (1.0 + 1e-12));
    }

    #[test]
    fn frozen_criteria_match_dense_for_any_design(mask in prop::collection::vec(any::<bool>(), 81)) {
        let fx = fixture();
        let design = design_from_mask(&mask, fx.sigma);
        let frozen = &fx.offline.frozen;
        let goal = frozen.goal_posterior_trace(&design).unwrap();
        let classical = frozen.posterior_trace(&design).unwrap();
        prop_assert!(rel(goal, fx.dense.goal_trace(&design).unwrap()) < 1e-6);
        prop_assert!(rel(classical, fx.dense.trace_cov(&design).unwrap()) < 1e-6);
    }

    #[test]
    fn adding_a_sensor_never_increases_the_goal_trace(mask in prop::collection::vec(any::<bool>(), 81), j in 0usize..81) {
        let fx = fixture();
        let design = design_from_mask(&mask, fx.sigma);
        let frozen = &fx.offline.frozen;
        let before = frozen.goal_posterior_trace(&design).unwrap();
        let after = frozen.goal_posterior_trace(&design.with_sensor(j)).unwrap();
        prop_assert!(after <= before * (1.0 + 1e-10));
    }
}
