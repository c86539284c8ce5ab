//! Built-in example systems and the convergence / contraction experiments.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::QuadraticTrackingCost;
use crate::dynamics::{DynamicsModel, Integrator};
use crate::problem::{control_update_norm, IterationRecord, OcProblem, Trajectory};
use crate::solver::{contraction_rate, InitStrategy, Solver, SolverSettings, Status, Variant};
use crate::{Error, Matrix, Result, Vector};

pub const BENCHMARK_NAMES: [&str; 4] = ["scalar_unstable", "pendulum", "cartpole", "linear_random"];

/// `dx/dt = (1 + x) x + u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarUnstable;

impl DynamicsModel for ScalarUnstable {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn flow(&self, x: &Vector, u: &Vector) -> Vector {
        Vector::from_element(1, (1.0 + x[0]) * x[0] + u[0])
    }
    fn flow_jacobians(&self, x: &Vector, _u: &Vector) -> (Matrix, Matrix) {
        (
            Matrix::from_element(1, 1, 1.0 + 2.0 * x[0]),
            Matrix::from_element(1, 1, 1.0),
        )
    }
}

/// Torque-driven pendulum, `x = (angle, rate)`, angle 0 hanging down.
#[derive(Debug, Clone, Copy)]
pub struct Pendulum {
    pub gravity: f64,
    pub length: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            length: 1.0,
        }
    }
}

impl DynamicsModel for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn flow(&self, x: &Vector, u: &Vector) -> Vector {
        let w2 = self.gravity / self.length;
        Vector::from_vec(vec![x[1], -w2 * x[0].sin() + u[0]])
    }
    fn flow_jacobians(&self, x: &Vector, _u: &Vector) -> (Matrix, Matrix) {
        let w2 = self.gravity / self.length;
        (
            Matrix::from_row_slice(2, 2, &[0.0, 1.0, -w2 * x[0].cos(), 0.0]),
            Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
    }
}

/// Cart with a point-mass pole, `x = (position, angle, velocity, angular
/// rate)`, angle 0 upright, horizontal force on the cart.
#[derive(Debug, Clone, Copy)]
pub struct CartPole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// distance from pivot to the pole's center of mass
    pub half_length: f64,
    pub gravity: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
        }
    }
}

struct CartPoleTerms {
    temp: f64,
    denom: f64,
    numer: f64,
    theta_acc: f64,
    x_acc: f64,
}

impl CartPole {
    fn terms(&self, theta: f64, omega: f64, force: f64) -> CartPoleTerms {
        let (s, c) = theta.sin_cos();
        let mt = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        let temp = (force + ml * omega * omega * s) / mt;
        let denom = self.half_length * (4.0 / 3.0 - self.pole_mass * c * c / mt);
        let numer = self.gravity * s - c * temp;
        let theta_acc = numer / denom;
        let x_acc = temp - ml * theta_acc * c / mt;
        CartPoleTerms {
            temp,
            denom,
            numer,
            theta_acc,
            x_acc,
        }
    }
}

impl DynamicsModel for CartPole {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn flow(&self, x: &Vector, u: &Vector) -> Vector {
        let t = self.terms(x[1], x[3], u[0]);
        Vector::from_vec(vec![x[2], x[3], t.x_acc, t.theta_acc])
    }
    fn flow_jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix) {
        let (theta, omega) = (x[1], x[3]);
        let (s, c) = theta.sin_cos();
        let mt = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        let t = self.terms(theta, omega, u[0]);

        let temp_th = ml * omega * omega * c / mt;
        let temp_om = 2.0 * ml * omega * s / mt;
        let temp_f = 1.0 / mt;
        let denom_th = self.half_length * 2.0 * self.pole_mass * c * s / mt;
        let numer_th = self.gravity * c + s * t.temp - c * temp_th;

        let dd = t.denom * t.denom;
        let th_th = (numer_th * t.denom - t.numer * denom_th) / dd;
        let th_om = -c * temp_om / t.denom;
        let th_f = -c * temp_f / t.denom;
        let k = ml / mt;
        let xa_th = temp_th - k * (th_th * c - t.theta_acc * s);
        let xa_om = temp_om - k * th_om * c;
        let xa_f = temp_f - k * th_f * c;

        let a = Matrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, xa_th, 0.0, xa_om, //
                0.0, th_th, 0.0, th_om,
            ],
        );
        let b = Matrix::from_row_slice(4, 1, &[0.0, 0.0, xa_f, th_f]);
        (a, b)
    }
}

/// `dx/dt = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
}

impl DynamicsModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn flow(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }
    fn flow_jacobians(&self, _x: &Vector, _u: &Vector) -> (Matrix, Matrix) {
        (self.a.clone(), self.b.clone())
    }
}

/// A named problem with its goal state and default initial guess.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub problem: OcProblem,
    pub x_goal: Vector,
    pub default_init: InitStrategy,
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

pub fn scalar_unstable() -> Benchmark {
    let cost = QuadraticTrackingCost::new(
        scalar(0.0),
        scalar(0.01),
        scalar(10.0),
        Vector::zeros(1),
        Vector::zeros(1),
    )
    .expect("valid weights");
    let problem = OcProblem::new(
        Arc::new(ScalarUnstable),
        Arc::new(cost),
        Integrator::rk4(0.01),
        300,
        Vector::from_element(1, 1.5),
    )
    .expect("valid problem");
    Benchmark {
        name: "scalar_unstable".into(),
        problem,
        x_goal: Vector::zeros(1),
        default_init: InitStrategy::SteadyState,
    }
}

/// Swing-up from hanging at rest to upright at rest in 3 s.
pub fn pendulum() -> Benchmark {
    let goal = Vector::from_vec(vec![std::f64::consts::PI, 0.0]);
    let cost = QuadraticTrackingCost::new(
        Matrix::from_diagonal(&Vector::from_vec(vec![0.1, 0.01])),
        scalar(0.01),
        Matrix::from_diagonal(&Vector::from_vec(vec![100.0, 10.0])),
        goal.clone(),
        Vector::zeros(1),
    )
    .expect("valid weights");
    let problem = OcProblem::new(
        Arc::new(Pendulum::default()),
        Arc::new(cost),
        Integrator::rk4(0.05),
        60,
        Vector::zeros(2),
    )
    .expect("valid problem");
    Benchmark {
        name: "pendulum".into(),
        problem,
        x_goal: goal,
        default_init: InitStrategy::SteadyState,
    }
}

/// Balancing the pole upright from a 0.2 rad tilt over 2 s.
pub fn cartpole() -> Benchmark {
    let cost = QuadraticTrackingCost::new(
        Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1.0, 0.1, 0.1])),
        scalar(0.1),
        Matrix::from_diagonal(&Vector::from_vec(vec![10.0, 10.0, 1.0, 1.0])),
        Vector::zeros(4),
        Vector::zeros(1),
    )
    .expect("valid weights");
    let problem = OcProblem::new(
        Arc::new(CartPole::default()),
        Arc::new(cost),
        Integrator::rk4(0.02),
        100,
        Vector::from_vec(vec![0.0, 0.2, 0.0, 0.0]),
    )
    .expect("valid problem");
    Benchmark {
        name: "cartpole".into(),
        problem,
        x_goal: Vector::zeros(4),
        default_init: InitStrategy::Interpolate {
            x_goal: Vector::zeros(4),
        },
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-half_width..half_width))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, half_width: f64) -> Vector {
    Vector::from_fn(len, |_, _| rng.random_range(-half_width..half_width))
}

/// Random linear system with a random quadratic tracking cost.
///
/// Drawn from `seed`; `B` is redrawn until `(A, B)` is controllable.
pub fn linear_random(
    seed: u64,
    state_dim: usize,
    control_dim: usize,
    horizon: usize,
) -> Result<Benchmark> {
    if state_dim == 0 || control_dim == 0 || horizon == 0 {
        return Err(Error::Config(
            "linear_random needs positive dimensions and horizon".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform_matrix(&mut rng, state_dim, state_dim, 1.0);
    let mut b = uniform_matrix(&mut rng, state_dim, control_dim, 1.0);
    while !is_controllable(&a, &b) {
        b = uniform_matrix(&mut rng, state_dim, control_dim, 1.0);
    }
    let mq = uniform_matrix(&mut rng, state_dim, state_dim, 1.0);
    let mr = uniform_matrix(&mut rng, control_dim, control_dim, 1.0);
    let q = &mq * mq.transpose() * 0.1;
    let r = &mr * mr.transpose() + Matrix::identity(control_dim, control_dim) * 0.1;
    let q_final = &q * 10.0 + Matrix::identity(state_dim, state_dim);
    let x_goal = uniform_vector(&mut rng, state_dim, 1.0);
    let u_goal = uniform_vector(&mut rng, control_dim, 0.5);
    let x_init = uniform_vector(&mut rng, state_dim, 1.0);
    let cost = QuadraticTrackingCost::new(q, r, q_final, x_goal.clone(), u_goal)?;
    let problem = OcProblem::new(
        Arc::new(LinearSystem { a, b }),
        Arc::new(cost),
        Integrator::rk4(0.05),
        horizon,
        x_init,
    )?;
    Ok(Benchmark {
        name: "linear_random".into(),
        problem,
        default_init: InitStrategy::Interpolate {
            x_goal: x_goal.clone(),
        },
        x_goal,
    })
}

fn is_controllable(a: &Matrix, b: &Matrix) -> bool {
    let m = a.nrows();
    let p = b.ncols();
    let mut ctrb = Matrix::zeros(m, m * p);
    let mut block = b.clone();
    for k in 0..m {
        ctrb.view_mut((0, k * p), (m, p)).copy_from(&block);
        block = a * block;
    }
    ctrb.rank(1e-8) == m
}

/// Benchmark by name, with default parameters (`linear_random` uses seed 0,
/// three states, two controls and 40 stages).
pub fn by_name(name: &str) -> Result<Benchmark> {
    match name {
        "scalar_unstable" => Ok(scalar_unstable()),
        "pendulum" => Ok(pendulum()),
        "cartpole" => Ok(cartpole()),
        "linear_random" => linear_random(0, 3, 2, 40),
        _ => Err(Error::Config(format!(
            "unknown problem '{name}' (expected one of {})",
            BENCHMARK_NAMES.join(", ")
        ))),
    }
}

/// Indices of nonzero defect vectors.
pub fn nonzero_defect_stages(traj: &Trajectory) -> Vec<usize> {
    traj.defects
        .iter()
        .enumerate()
        .filter(|(_, d)| d.iter().any(|&v| v != 0.0))
        .map(|(k, _)| k)
        .collect()
}

/// One variant's run within a convergence experiment.
#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub variant: Variant,
    pub status: Status,
    pub records: Vec<IterationRecord>,
    /// Nonzero-defect stages of the initial rollout and after each
    /// iteration.
    pub defect_stages: Vec<Vec<usize>>,
    pub final_trajectory: Option<Trajectory>,
    pub final_cost: Option<f64>,
    pub failure: Option<Error>,
}

impl ConvergenceRun {
    /// First iteration (1-based) whose cost lies within `rel_tol` of
    /// `j_star`.
    pub fn iterations_to_within(&self, j_star: f64, rel_tol: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| (r.cost - j_star).abs() <= rel_tol * j_star.abs())
            .map(|r| r.iter)
    }
}

/// Solves `problem` once per variant from the same initial guess.
///
/// Variants that fail to initialize or iterate are reported through their
/// status instead of aborting the experiment.
pub fn run_convergence_experiment(
    problem: &OcProblem,
    variants: &[Variant],
    init: &InitStrategy,
    settings: &SolverSettings,
) -> Result<Vec<ConvergenceRun>> {
    settings.validate()?;
    variants
        .iter()
        .map(|&variant| {
            let mut run = ConvergenceRun {
                variant,
                status: Status::Running,
                records: Vec::new(),
                defect_stages: Vec::new(),
                final_trajectory: None,
                final_cost: None,
                failure: None,
            };
            let mut solver = match Solver::new(problem.clone(), variant, settings.clone(), init) {
                Ok(s) => s,
                Err(e @ Error::UnstableInitialization { .. }) => {
                    run.status = Status::UnstableRollout;
                    run.failure = Some(e);
                    return Ok(run);
                }
                Err(e) => return Err(e),
            };
            run.defect_stages.push(nonzero_defect_stages(solver.trajectory()));
            while solver.status() == Status::Running {
                let accepted = solver.records().len();
                match solver.iterate() {
                    Ok(_) => {
                        if solver.records().len() > accepted {
                            run.defect_stages.push(nonzero_defect_stages(solver.trajectory()));
                        }
                    }
                    Err(e) => {
                        run.status = Status::Diverged;
                        run.failure = Some(e);
                        break;
                    }
                }
            }
            let result = solver.into_result();
            if run.failure.is_none() {
                run.status = result.status;
                run.failure = result.failure;
            }
            run.records = result.records;
            run.final_cost = Some(result.cost);
            run.final_trajectory = Some(result.trajectory);
            Ok(run)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionConfig {
    pub samples: usize,
    /// Radius of the uniform ball around `x_init`.
    pub scale: f64,
    pub seed: u64,
    /// Number of trailing iterates in the rate regression.
    pub last_k: usize,
    /// Iterations of the reference solves.
    pub reference_iters: usize,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            scale: 0.1,
            seed: 0,
            last_k: 5,
            reference_iters: 200,
        }
    }
}

/// Per-variant aggregate of a contraction study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSummary {
    pub variant: String,
    #[serde(rename = "M")]
    pub intervals: usize,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub n_converged: usize,
    pub n_excluded: usize,
    /// Converged samples whose rate could not be estimated.
    pub n_degenerate: usize,
    /// Rates in sample order (`None` for excluded or degenerate samples).
    pub rates: Vec<Option<f64>>,
}

/// Converged iLQR solution of `problem`, iterated until the control update
/// vanishes, stops shrinking at rounding level, or `max_iters` is reached.
pub fn reference_solution(
    problem: &OcProblem,
    init: &InitStrategy,
    max_iters: usize,
) -> Result<(Trajectory, Vec<Matrix>)> {
    let settings = SolverSettings {
        max_iters: max_iters.max(1),
        ..SolverSettings::default()
    };
    let mut solver = Solver::new(problem.clone(), Variant::ILQR, settings, init)?;
    let mut previous = f64::INFINITY;
    for _ in 0..max_iters {
        let out = solver.iterate()?;
        if matches!(
            out.status,
            Status::Diverged | Status::UnstableRollout | Status::Stalled
        ) {
            return Err(Error::Config(format!(
                "reference solve failed with status {}",
                out.status
            )));
        }
        let update = out.record.update_norm;
        let scale = control_norm(&solver.trajectory().controls).max(1.0);
        if update < 1e-14 || (update < 1e-10 * scale && update >= previous) {
            break;
        }
        previous = update;
    }
    let gains = solver
        .last_solution()
        .map(|s| s.policy.gains.clone())
        .ok_or_else(|| Error::Config("reference solve ran no iteration".into()))?;
    Ok((solver.trajectory().clone(), gains))
}

fn control_norm(controls: &[Vector]) -> f64 {
    controls.iter().map(|u| u.norm_squared()).sum::<f64>().sqrt()
}

/// Uniform sample from the ball of radius `scale` (rejection sampling from
/// the enclosing cube).
fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    loop {
        let v = uniform_vector(rng, dim, 1.0);
        if v.norm() <= 1.0 {
            return v * scale;
        }
    }
}

/// Perturbed initial states, one per sample, in sample order.
pub fn perturbed_initial_states(x_init: &Vector, cfg: &ContractionConfig) -> Vec<Vector> {
    (0..cfg.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            x_init + ball_sample(&mut rng, x_init.len(), cfg.scale)
        })
        .collect()
}

enum SampleRate {
    Rate(f64),
    Degenerate,
    Excluded,
}

/// Local contraction rates under perturbed initial states.
///
/// A fully converged iLQR solution of the nominal problem supplies the
/// initial guess for every sample: its controls and states as reference and
/// its feedback gains as policy. For each sample the converged controls
/// `U*` come from an iLQR solve iterated to machine precision; each variant
/// then runs with `settings` and its rate is fitted to the trailing errors
/// `|U[k] - U*|`. Samples whose run does not converge are excluded and
/// counted.
pub fn run_contraction_study(
    bench: &Benchmark,
    variants: &[Variant],
    cfg: &ContractionConfig,
    settings: &SolverSettings,
) -> Result<Vec<ContractionSummary>> {
    settings.validate()?;
    if cfg.last_k < 2 {
        return Err(Error::Config("last_k must be at least 2".into()));
    }
    let problem = &bench.problem;
    let (reference, gains) =
        reference_solution(problem, &bench.default_init, cfg.reference_iters)?;
    let policy_init = InitStrategy::Policy {
        states: reference.states.clone(),
        controls: reference.controls.clone(),
        gains,
    };
    let starts = perturbed_initial_states(&problem.x_init, cfg);
    let settings = SolverSettings {
        keep_iterates: true,
        ..settings.clone()
    };

    let per_sample: Vec<Vec<SampleRate>> = starts
        .par_iter()
        .map(|x0| {
            let sample = match problem.with_x_init(x0.clone()) {
                Ok(p) => p,
                Err(_) => return variants.iter().map(|_| SampleRate::Excluded).collect(),
            };
            let u_star = match reference_solution(&sample, &policy_init, cfg.reference_iters) {
                Ok((t, _)) => t.controls,
                Err(_) => return variants.iter().map(|_| SampleRate::Excluded).collect(),
            };
            variants
                .iter()
                .map(|&v| sample_rate(&sample, v, &policy_init, &settings, &u_star, cfg.last_k))
                .collect()
        })
        .collect();

    let horizon = problem.horizon;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let mut summary = ContractionSummary {
                variant: v.to_string(),
                intervals: v.interval_count(horizon),
                mean_rate: f64::NAN,
                std_rate: f64::NAN,
                n_converged: 0,
                n_excluded: 0,
                n_degenerate: 0,
                rates: Vec::with_capacity(per_sample.len()),
            };
            for s in &per_sample {
                match s[j] {
                    SampleRate::Rate(c) => {
                        summary.n_converged += 1;
                        summary.rates.push(Some(c));
                    }
                    SampleRate::Degenerate => {
                        summary.n_converged += 1;
                        summary.n_degenerate += 1;
                        summary.rates.push(None);
                    }
                    SampleRate::Excluded => {
                        summary.n_excluded += 1;
                        summary.rates.push(None);
                    }
                }
            }
            let rates: Vec<f64> = summary.rates.iter().flatten().copied().collect();
            if !rates.is_empty() {
                let n = rates.len() as f64;
                let mean = rates.iter().sum::<f64>() / n;
                let var = rates.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
                summary.mean_rate = mean;
                summary.std_rate = var.sqrt();
            }
            summary
        })
        .collect())
}

fn sample_rate(
    problem: &OcProblem,
    variant: Variant,
    init: &InitStrategy,
    settings: &SolverSettings,
    u_star: &[Vector],
    last_k: usize,
) -> SampleRate {
    let result = Solver::new(problem.clone(), variant, settings.clone(), init)
        .and_then(|s| s.run(|_| {}));
    match result {
        Ok(r) if r.status == Status::Converged => {
            match contraction_rate(&r.control_iterates, u_star, last_k) {
                Ok(c) => SampleRate::Rate(c),
                Err(_) => SampleRate::Degenerate,
            }
        }
        _ => SampleRate::Excluded,
    }
}

/// `|U[k] - U*| / |U*|` for every iterate.
pub fn normalized_errors(iterates: &[Vec<Vector>], u_star: &[Vector]) -> Result<Vec<f64>> {
    let zero: Vec<Vector> = u_star.iter().map(|u| Vector::zeros(u.len())).collect();
    let scale = control_update_norm(u_star, &zero)?.max(f64::MIN_POSITIVE);
    iterates
        .iter()
        .map(|u| control_update_norm(u, u_star).map(|e| e / scale))
        .collect()
}
