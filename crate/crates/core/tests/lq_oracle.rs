mod common;

use gnshoot::oracle::{feasibility_residual, solve_kkt, stationarity_residual};
use gnshoot::riccati::{backward_sweep, predicted_cost_change};
use gnshoot::solver::solve;
use gnshoot::sweep::forward_sweep;
use gnshoot::{bench, Regularization, SolverSettings, Status, Trajectory, Variant, Vector};
use proptest::prelude::*;

fn riccati_increments(lq: &gnshoot::LqSubproblem) -> (Vec<Vector>, Vec<Vector>, f64) {
    let (n, m, p) = (lq.horizon(), lq.state_dim(), lq.control_dim());
    let sol = backward_sweep(lq, &Regularization::default()).unwrap();
    let zero = Trajectory::zeros(m, p, n);
    let cand = forward_sweep(lq, &sol, &zero, &Vector::zeros(m), 1.0).unwrap();
    (cand.states, cand.controls, predicted_cost_change(&sol, lq))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn riccati_matches_dense_kkt(seed in any::<u64>(), m in 1usize..=4, p in 1usize..=3, n in 1usize..=20) {
        let lq = common::random_lq(&mut common::rng(seed), m, p, n);
        let kkt = solve_kkt(&lq).unwrap();
        let (dx, du, predicted) = riccati_increments(&lq);
        prop_assert!(common::rel_diff(&dx, &kkt.dx) < 1e-8);
        prop_assert!(common::rel_diff(&du, &kkt.du) < 1e-8);
        let rel = (predicted - kkt.objective_change).abs() / kkt.objective_change.abs().max(1.0);
        prop_assert!(rel < 1e-10, "{predicted} vs {}", kkt.objective_change);
    }

    #[test]
    fn riccati_solution_satisfies_optimality_conditions(seed in any::<u64>(), m in 1usize..=4, p in 1usize..=3, n in 1usize..=12) {
        let lq = common::random_lq(&mut common::rng(seed), m, p, n);
        let (dx, du, _) = riccati_increments(&lq);
        prop_assert!(feasibility_residual(&lq, &dx, &du) < 1e-10);
        let kkt = solve_kkt(&lq).unwrap();
        prop_assert!(stationarity_residual(&lq, &dx, &du, &kkt.multipliers).unwrap() < 1e-9);
    }
}

#[test]
fn oracle_residual_is_tiny() {
    let lq = common::random_lq(&mut common::rng(3), 3, 2, 15);
    let kkt = solve_kkt(&lq).unwrap();
    assert!(kkt.relative_residual < 1e-12);
    assert!(feasibility_residual(&lq, &kkt.dx, &kkt.du) < 1e-10);
}

#[test]
fn every_variant_solves_linear_problem_in_one_step() {
    let variants = [
        Variant::SS,
        Variant::ILQR,
        Variant::GNMS,
        Variant::gnms_m(4),
        Variant::ilqr_gnms_m(4),
    ];
    for seed in 0..5 {
        let b = bench::linear_random(seed, 3, 2, 20).unwrap();
        let settings = SolverSettings::default();
        for v in variants {
            let r = solve(&b.problem, v, &settings, &b.default_init).unwrap();
            assert_eq!(r.status, Status::Converged, "{v} seed {seed}");
            assert_eq!(r.iterations(), 2, "{v} seed {seed}");
            assert!(r.records[1].update_norm < 1e-10, "{v}: {}", r.records[1].update_norm);
            assert!(r.records[0].defect_l1 < 1e-12);
        }
    }
}
