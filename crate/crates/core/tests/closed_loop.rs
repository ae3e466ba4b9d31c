use std::sync::Arc;

use dualenkf_core::closed_loop::{
    estimate_cost, objective_from_costs, run_rollouts, simulate_closed_loop, LinearFeedback,
    ZeroPolicy,
};
use dualenkf_core::models::{make_smd_model, scalar_lq, SmdParams, SystemModel};
use dualenkf_core::policy::{gain_known_b, gain_model_free, SimulatedDrift};
use dualenkf_core::riccati::{integrate_dre, solve_are};
use dualenkf_core::{DMatrix, DVector, GainSchedule, HamiltonianOracle, Objective};
use proptest::prelude::*;

fn riccati_policy() -> (
    dualenkf_core::LtiSystem,
    dualenkf_core::CostSpec,
    LinearFeedback,
) {
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let sol = integrate_dre(&Objective::Soc, &lti, &cost, 5.0, 1e-2).unwrap();
    let schedule = GainSchedule {
        times: sol.times,
        ktilde: sol.p,
        gains: None,
    }
    .with_known_b(&lti, &cost)
    .unwrap();
    (lti.clone(), cost, LinearFeedback::new(schedule).unwrap())
}

fn costs(m: usize, seed: u64) -> Vec<f64> {
    let (lti, cost, policy) = riccati_policy();
    let x0 = DVector::from_element(1, 1.0);
    run_rollouts(&lti, &policy, &cost, &x0, 5.0, 1e-2, m, seed)
        .unwrap()
        .into_iter()
        .map(|o| o.cost)
        .collect()
}

#[test]
fn realized_costs_are_non_negative() {
    assert!(costs(200, 0).iter().all(|&c| c >= 0.0));
}

#[test]
fn optimal_cost_matches_value_function() {
    // With P = 1 on the scalar instance, v_0(x) = x^2 / 2 + g_0 and g_0 = T / 2.
    let c = costs(2000, 4);
    let est = objective_from_costs(&c, &Objective::Soc).unwrap();
    let expected = 0.5 + 2.5;
    assert!(
        (est.value - expected).abs() < 4.0 * est.std_error + 0.02,
        "{est:?}"
    );
}

#[test]
fn small_theta_matches_soc() {
    let c = costs(500, 1);
    let soc = objective_from_costs(&c, &Objective::Soc).unwrap().value;
    for theta in [1e-6, -1e-6] {
        let rsc = objective_from_costs(&c, &Objective::rsc(theta).unwrap())
            .unwrap()
            .value;
        assert!((rsc - soc).abs() / soc < 1e-3);
    }
}

#[test]
fn standard_error_scales_with_rollouts() {
    let (lti, cost, policy) = riccati_policy();
    let x0 = DVector::from_element(1, 1.0);
    let se = |m, seed| {
        estimate_cost(&lti, &policy, &cost, &x0, 5.0, 1e-2, m, &Objective::Soc, seed)
            .unwrap()
            .std_error
    };
    let ratio = (0..10).map(|seed| se(500, seed) / se(1000, 100 + seed)).sum::<f64>() / 10.0;
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn riccati_gain_beats_zero_control() {
    let (lti, cost, policy) = riccati_policy();
    let x0 = DVector::from_element(1, 1.0);
    let opt = estimate_cost(
        &lti,
        &policy,
        &cost,
        &x0,
        5.0,
        1e-2,
        400,
        &Objective::Soc,
        2,
    )
    .unwrap();
    let zero = estimate_cost(
        &lti,
        &ZeroPolicy { input_dim: 1 },
        &cost,
        &x0,
        5.0,
        1e-2,
        400,
        &Objective::Soc,
        2,
    )
    .unwrap();
    assert!(opt.value < zero.value);
}

#[test]
fn single_path_matches_rollout_set() {
    let (lti, cost, policy) = riccati_policy();
    let x0 = DVector::from_element(1, 1.0);
    let traj = simulate_closed_loop(&lti, &policy, &cost, &x0, 5.0, 1e-2, 8).unwrap();
    let outs = run_rollouts(&lti, &policy, &cost, &x0, 5.0, 1e-2, 3, 8).unwrap();
    assert_eq!(traj.total_cost(), outs[0].cost);
    assert_eq!(traj.final_state(), &outs[0].final_state);
}

#[test]
fn noisy_model_free_gain_is_within_five_percent() {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let p = solve_are(&Objective::Soc, &lti, &cost, 1e-10, 1e3).unwrap();
    let k = gain_known_b(&p, &lti, &cost).unwrap();
    let model: Arc<dyn SystemModel> = Arc::new(lti);
    let drift = SimulatedDrift::new(model, 1e-3, 10_000, 21, true).unwrap();
    let mut oracle =
        HamiltonianOracle::from_model(drift, GainSchedule::constant(p), cost.clone(), 10_000);
    for x in [[1.0, 0.0], [-0.4, 0.9]] {
        let x = DVector::from_row_slice(&x);
        let reference = &k * &x;
        let u = gain_model_free(&x, &mut oracle, &cost, 0.0).unwrap();
        assert!((u - &reference).norm() < 0.05 * reference.norm());
    }
}

#[test]
fn gain_with_known_b_is_exact_for_constant_schedule() {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let schedule = GainSchedule::constant(p.clone())
        .with_known_b(&lti, &cost)
        .unwrap();
    let k = schedule.gain_at(3.0).unwrap();
    assert_eq!(k, &gain_known_b(&p, &lti, &cost).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rsc_estimate_is_monotone_in_theta(
        c in prop::collection::vec(0.0f64..20.0, 2..40),
        mut thetas in prop::collection::vec(-3.0f64..3.0, 2..8),
    ) {
        thetas.retain(|t| t.abs() > 1e-9);
        thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let values: Vec<f64> = thetas
            .iter()
            .map(|&t| objective_from_costs(&c, &Objective::rsc(t).unwrap()).unwrap().value)
            .collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn rsc_estimate_lies_between_min_and_max(
        c in prop::collection::vec(0.0f64..20.0, 2..40),
        theta in -3.0f64..3.0,
    ) {
        prop_assume!(theta.abs() > 1e-9);
        let v = objective_from_costs(&c, &Objective::rsc(theta).unwrap()).unwrap().value;
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }
}
