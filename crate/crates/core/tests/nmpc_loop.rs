use gnshoot::bench::{self, Benchmark};
use gnshoot::nmpc::{run_closed_loop, ClosedLoopReport, NmpcController, NmpcSettings, Plant};
use gnshoot::solver::initialize;
use gnshoot::{Variant, Vector};

fn controller(b: &Benchmark, variant: Variant, warm: bool, shift: bool) -> NmpcController {
    let settings = NmpcSettings {
        shift,
        ..NmpcSettings::default()
    };
    if warm {
        let (traj, gains) = bench::reference_solution(&b.problem, &b.default_init, 200).unwrap();
        NmpcController::new(b.problem.clone(), variant, settings, traj.states, traj.controls, Some(gains)).unwrap()
    } else {
        let (traj, _) = initialize(&b.problem, variant, &b.default_init).unwrap();
        NmpcController::new(b.problem.clone(), variant, settings, traj.states, traj.controls, None).unwrap()
    }
}

fn simulate(b: &Benchmark, variant: Variant, warm: bool, noise: f64, seed: u64, duration: f64) -> ClosedLoopReport {
    let mut ctrl = controller(b, variant, warm, false);
    let mut plant = Plant::new(
        b.problem.dynamics.clone(),
        b.problem.integrator,
        b.problem.x_init.clone(),
        noise,
        seed,
    )
    .unwrap();
    run_closed_loop(&mut plant, &mut ctrl, duration).unwrap()
}

/// Everything but the timing columns.
fn data(r: &ClosedLoopReport) -> Vec<(usize, u64, Vec<u64>, Vec<u64>, u64, bool)> {
    r.cycles
        .iter()
        .map(|c| {
            (
                c.cycle,
                c.t_sim.to_bits(),
                c.x_meas.iter().map(|v| v.to_bits()).collect(),
                c.u_applied.iter().map(|v| v.to_bits()).collect(),
                c.cost_stage.to_bits(),
                c.fallback,
            )
        })
        .collect()
}

#[test]
fn scalar_loop_settles_within_five_seconds() {
    let b = bench::scalar_unstable();
    let r = simulate(&b, Variant::ilqr_gnms_m(5), false, 0.0, 0, 5.0);
    assert_eq!(r.cycles.len(), 500);
    assert!(r.aborted.is_none());
    assert!(r.final_state[0].abs() < 0.01, "x_final {}", r.final_state[0]);
    assert!(r.cycles.iter().all(|c| !c.fallback));
}

#[test]
fn warm_start_is_no_worse_than_cold_start() {
    let b = bench::scalar_unstable();
    let warm = simulate(&b, Variant::ilqr_gnms_m(5), true, 0.0, 0, 1.0);
    let cold = simulate(&b, Variant::ilqr_gnms_m(5), false, 0.0, 0, 1.0);
    assert!(
        warm.accumulated_cost <= cold.accumulated_cost + 1e-9,
        "warm {} cold {}",
        warm.accumulated_cost,
        cold.accumulated_cost
    );
    let (opt, _) = bench::reference_solution(&b.problem, &b.default_init, 200).unwrap();
    let u_opt = opt.controls[0][0];
    assert!((warm.cycles[0].u_applied[0] - u_opt).abs() < 1e-8);
    assert!((cold.cycles[0].u_applied[0] - u_opt).abs() > 1e-3);
}

#[test]
fn parallel_and_serial_preparation_agree_bitwise() {
    let b = bench::scalar_unstable();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate(&b, Variant::ilqr_gnms_m(5), false, 0.02, 9, 0.5))
    };
    assert_eq!(data(&run(1)), data(&run(4)));
}

#[test]
fn noisy_runs_depend_only_on_seed() {
    let b = bench::scalar_unstable();
    let a = simulate(&b, Variant::GNMS, false, 0.01, 3, 0.3);
    let again = simulate(&b, Variant::GNMS, false, 0.01, 3, 0.3);
    let other = simulate(&b, Variant::GNMS, false, 0.01, 4, 0.3);
    assert_eq!(data(&a), data(&again));
    assert_ne!(data(&a), data(&other));
}

#[test]
fn cartpole_loop_balances_the_pole() {
    let b = bench::cartpole();
    let r = simulate(&b, Variant::ilqr_gnms_m(5), true, 0.0, 0, 2.0);
    assert!(r.aborted.is_none());
    let theta0 = b.problem.x_init[1].abs();
    assert!(r.final_state[1].abs() < 0.1 * theta0, "final state {}", r.final_state);
}

#[test]
fn open_loop_and_shifted_controllers_run() {
    let b = bench::scalar_unstable();
    for (variant, shift) in [(Variant::GNMS, false), (Variant::gnms_m(5), true), (Variant::ILQR, true)] {
        let mut ctrl = controller(&b, variant, false, shift);
        let mut plant = Plant::new(
            b.problem.dynamics.clone(),
            b.problem.integrator,
            b.problem.x_init.clone(),
            0.0,
            0,
        )
        .unwrap();
        let r = run_closed_loop(&mut plant, &mut ctrl, 2.0).unwrap();
        assert!(r.aborted.is_none(), "{variant} shift {shift}");
        assert!(r.final_state[0].abs() < 0.5, "{variant} shift {shift}: {}", r.final_state[0]);
    }
}

#[test]
fn feedback_plan_starts_at_measurement() {
    let b = bench::pendulum();
    let mut ctrl = controller(&b, Variant::ilqr_gnms_m(4), true, false);
    let x = Vector::from_vec(vec![0.05, -0.1]);
    let (policy, latency) = ctrl.feedback_step(&x).unwrap();
    assert_eq!(policy.states[0], x);
    assert!(!latency.fallback);
    assert_eq!(ctrl.published().unwrap(), &policy);
}
