//! Gauss-Newton shooting iteration for the whole variant family.
//!
//! | variant        | intervals | interval rollout |
//! |----------------|-----------|------------------|
//! | SS             | 1         | open loop        |
//! | iLQR           | 1         | closed loop      |
//! | GNMS           | N         | (no interior)    |
//! | GNMS(M)        | M         | open loop        |
//! | iLQR-GNMS(M)   | M         | closed loop      |

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost;
use crate::dynamics::StageSensitivity;
use crate::lq::{self, LqSubproblem};
use crate::problem::{control_update_norm, IterationRecord, OcProblem, Trajectory};
use crate::riccati::{backward_sweep, FeedbackPolicy, Regularization, RiccatiSolution};
use crate::sweep::{self, IntervalPartition, RolloutFeedback};
use crate::{Error, Matrix, Result, Vector};

/// Shooting structure of a solver variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Number of shooting intervals; `None` means one per stage (`M = N`).
    pub intervals: Option<usize>,
    /// Whether interval rollouts apply the feedback gains.
    pub closed_loop: bool,
}

impl Variant {
    pub const SS: Variant = Variant {
        intervals: Some(1),
        closed_loop: false,
    };
    pub const ILQR: Variant = Variant {
        intervals: Some(1),
        closed_loop: true,
    };
    pub const GNMS: Variant = Variant {
        intervals: None,
        closed_loop: false,
    };

    pub fn gnms_m(intervals: usize) -> Self {
        Self {
            intervals: Some(intervals),
            closed_loop: false,
        }
    }

    pub fn ilqr_gnms_m(intervals: usize) -> Self {
        Self {
            intervals: Some(intervals),
            closed_loop: true,
        }
    }

    /// Number of shooting intervals on a horizon of `horizon` stages.
    pub fn interval_count(&self, horizon: usize) -> usize {
        self.intervals.unwrap_or(horizon)
    }

    pub fn partition(&self, horizon: usize) -> Result<IntervalPartition> {
        sweep::partition(horizon, self.interval_count(horizon))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.intervals, self.closed_loop) {
            (None, _) => write!(f, "GNMS"),
            (Some(1), false) => write!(f, "SS"),
            (Some(1), true) => write!(f, "iLQR"),
            (Some(m), false) => write!(f, "GNMS({m})"),
            (Some(m), true) => write!(f, "iLQR-GNMS({m})"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `SS`, `iLQR`, `GNMS`, `GNMS(M)` and `iLQR-GNMS(M)`,
    /// case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown variant '{s}'"));
        let (head, count) = match lower.split_once('(') {
            Some((h, rest)) => {
                let digits = rest.strip_suffix(')').ok_or_else(bad)?;
                let m: usize = digits.trim().parse().map_err(|_| bad())?;
                if m == 0 {
                    return Err(Error::Config(format!(
                        "variant '{s}' needs at least one interval"
                    )));
                }
                (h.trim().to_string(), Some(m))
            }
            None => (lower.clone(), None),
        };
        match (head.as_str(), count) {
            ("ss", None) => Ok(Self::SS),
            ("ilqr", None) => Ok(Self::ILQR),
            ("gnms", None) => Ok(Self::GNMS),
            ("gnms", Some(m)) => Ok(Self::gnms_m(m)),
            ("ilqr-gnms", Some(m)) => Ok(Self::ilqr_gnms_m(m)),
            _ => Err(bad()),
        }
    }
}

/// Backtracking merit line search over `phi(alpha) = J + rho * sum|d|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearch {
    pub enabled: bool,
    /// Step sizes tried in order.
    pub alphas: Vec<f64>,
    /// Defect weight in the merit function.
    pub rho: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            enabled: false,
            alphas: (0..8).map(|k| 0.5f64.powi(k)).collect(),
            rho: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Largest accepted total defect at convergence.
    pub d_max: f64,
    /// Largest accepted relative cost change at convergence.
    pub j_rel_min: f64,
    pub max_iters: usize,
    pub line_search: LineSearch,
    pub regularization: Regularization,
    /// Factor over the initial cost / defect at which a run counts as
    /// diverged.
    pub divergence_factor: f64,
    /// Keep every control iterate (needed for contraction estimates).
    pub keep_iterates: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            d_max: 1e-6,
            j_rel_min: 1e-6,
            max_iters: 100,
            line_search: LineSearch::default(),
            regularization: Regularization::default(),
            divergence_factor: 1e6,
            keep_iterates: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0) {
            return Err(Error::Config("d_max must be positive".into()));
        }
        if !(self.j_rel_min > 0.0) {
            return Err(Error::Config("j_rel_min must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        let ls = &self.line_search;
        if !(ls.rho >= 0.0) {
            return Err(Error::Config("line_search.rho must be nonnegative".into()));
        }
        if ls.alphas.is_empty() || ls.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(
                "line_search.alphas must be a nonempty list of values in (0, 1]".into(),
            ));
        }
        let reg = &self.regularization;
        if !(reg.mu_init > 0.0 && reg.factor > 1.0 && reg.mu_max >= reg.mu_init) {
            return Err(Error::Config(
                "regularization needs mu_init > 0, factor > 1 and mu_max >= mu_init".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    /// Cost or defect exceeded the divergence guard.
    Diverged,
    /// An interval rollout blew up.
    UnstableRollout,
    /// The line search found no step that decreases the merit.
    Stalled,
    /// Not terminated yet.
    Running,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::Diverged => "diverged",
            Status::UnstableRollout => "unstable_rollout",
            Status::Stalled => "stalled",
            Status::Running => "running",
        };
        f.write_str(s)
    }
}

/// Initial guess.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Constant control holding `x_init` at rest (`f(x_init, u) = 0`);
    /// every state equals `x_init`.
    SteadyState,
    /// States interpolated linearly from `x_init` to `x_goal`, zero controls.
    Interpolate { x_goal: Vector },
    /// Explicit states and controls; `states[0]` is replaced by `x_init`.
    Provided {
        states: Vec<Vector>,
        controls: Vec<Vector>,
    },
    /// Feedback policy `u = u_ref + L (x - x_ref)` around a reference.
    ///
    /// Every interval start applies the law; closed-loop variants also
    /// apply it inside intervals.
    Policy {
        states: Vec<Vector>,
        controls: Vec<Vector>,
        gains: Vec<Matrix>,
    },
}

/// Control that makes `x` an equilibrium of the continuous dynamics, by
/// Gauss-Newton on `f(x, u) = 0`.
pub fn steady_state_control(problem: &OcProblem, x: &Vector) -> Result<Vector> {
    let model = problem.dynamics.as_ref();
    let mut u = Vector::zeros(problem.control_dim());
    let tol = 1e-10 * x.amax().max(1.0);
    for _ in 0..50 {
        let f = model.flow(x, &u);
        if f.amax() <= tol {
            return Ok(u);
        }
        let (_, b) = model.flow_jacobians(x, &u);
        let du = b
            .svd(true, true)
            .solve(&f, 1e-12)
            .map_err(|e| Error::Config(format!("steady-state solve failed: {e}")))?;
        if du.amax() < 1e-15 * u.amax().max(1.0) {
            break;
        }
        u -= du;
    }
    let f = model.flow(x, &u);
    if f.amax() <= tol {
        Ok(u)
    } else {
        Err(Error::Config(format!(
            "no control holds x_init at rest (residual {:e})",
            f.amax()
        )))
    }
}

/// Builds the initial trajectory and runs the first interval rollouts.
///
/// Returns the rolled-out trajectory and the sensitivities along it.
pub fn initialize(
    problem: &OcProblem,
    variant: Variant,
    init: &InitStrategy,
) -> Result<(Trajectory, Vec<StageSensitivity>)> {
    let (n, m, p) = (problem.horizon, problem.state_dim(), problem.control_dim());
    let partition = variant.partition(n)?;
    let x0 = &problem.x_init;

    let (candidate, policy_ref) = match init {
        InitStrategy::SteadyState => {
            let u = steady_state_control(problem, x0)?;
            let traj = Trajectory::from_parts(vec![x0.clone(); n + 1], vec![u; n])?;
            (traj, None)
        }
        InitStrategy::Interpolate { x_goal } => {
            if x_goal.len() != m {
                return Err(Error::dim("x_goal", m, x_goal.len()));
            }
            let states = (0..=n)
                .map(|k| {
                    let s = k as f64 / n as f64;
                    x0 * (1.0 - s) + x_goal * s
                })
                .collect();
            (Trajectory::from_parts(states, vec![Vector::zeros(p); n])?, None)
        }
        InitStrategy::Provided { states, controls } => {
            let mut traj = Trajectory::from_parts(states.clone(), controls.clone())?;
            traj.check_dims(m, p, n)?;
            traj.states[0] = x0.clone();
            (traj, None)
        }
        InitStrategy::Policy {
            states,
            controls,
            gains,
        } => {
            let reference = Trajectory::from_parts(states.clone(), controls.clone())?;
            reference.check_dims(m, p, n)?;
            if gains.len() != n {
                return Err(Error::dim("gain sequence", n, gains.len()));
            }
            if let Some(g) = gains.iter().find(|g| g.shape() != (p, m)) {
                return Err(Error::dim("gain matrix rows", p, g.nrows()));
            }
            let policy = FeedbackPolicy {
                feedforward: vec![Vector::zeros(p); n],
                gains: gains.clone(),
            };
            let mut traj = reference.clone();
            traj.states[0] = x0.clone();
            traj.controls[0] = crate::dynamics::feedback_control(
                &reference.controls[0],
                &policy.feedforward[0],
                &policy.gains[0],
                x0,
                &reference.states[0],
                1.0,
            );
            (traj, Some((policy, reference)))
        }
    };
    candidate.check_dims(m, p, n)?;

    let feedback = match (&policy_ref, variant.closed_loop) {
        (Some((policy, reference)), true) => Some(RolloutFeedback {
            policy,
            reference,
            alpha: 1.0,
        }),
        _ => None,
    };
    let rollout = sweep::rollout_and_defects(problem, &partition, &candidate, feedback)
        .map_err(|e| match e {
            Error::Divergence { stage, interval } => {
                Error::UnstableInitialization { stage, interval }
            }
            other => other,
        })?;
    Ok((rollout.trajectory, rollout.sensitivities))
}

/// Outcome of a single iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub record: IterationRecord,
    pub status: Status,
}

/// Stateful solver that can be advanced one iteration at a time.
#[derive(Debug, Clone)]
pub struct Solver {
    problem: OcProblem,
    variant: Variant,
    settings: SolverSettings,
    partition: IntervalPartition,
    traj: Trajectory,
    sens: Vec<StageSensitivity>,
    cost: f64,
    defect_l1: f64,
    guard_cost: f64,
    guard_defect: f64,
    iter: usize,
    records: Vec<IterationRecord>,
    iterates: Vec<Vec<Vector>>,
    last_lq: Option<LqSubproblem>,
    last_solution: Option<RiccatiSolution>,
    last_candidate: Option<Trajectory>,
    status: Status,
    failure: Option<Error>,
}

impl Solver {
    pub fn new(
        problem: OcProblem,
        variant: Variant,
        settings: SolverSettings,
        init: &InitStrategy,
    ) -> Result<Self> {
        settings.validate()?;
        let (traj, sens) = initialize(&problem, variant, init)?;
        Self::from_rollout(problem, variant, settings, traj, sens)
    }

    /// Starts from an already rolled-out trajectory and its sensitivities.
    pub fn from_rollout(
        problem: OcProblem,
        variant: Variant,
        settings: SolverSettings,
        traj: Trajectory,
        sens: Vec<StageSensitivity>,
    ) -> Result<Self> {
        settings.validate()?;
        let partition = variant.partition(problem.horizon)?;
        traj.check_dims(problem.state_dim(), problem.control_dim(), problem.horizon)?;
        if sens.len() != problem.horizon {
            return Err(Error::dim("sensitivity sequence", problem.horizon, sens.len()));
        }
        let cost = cost::evaluate(problem.cost.as_ref(), &traj)?;
        let defect_l1 = traj.total_defect();
        let iterates = if settings.keep_iterates {
            vec![traj.controls.clone()]
        } else {
            Vec::new()
        };
        Ok(Self {
            guard_cost: settings.divergence_factor * cost.abs().max(1.0),
            guard_defect: settings.divergence_factor * defect_l1.max(1.0),
            problem,
            variant,
            settings,
            partition,
            traj,
            sens,
            cost,
            defect_l1,
            iter: 0,
            records: Vec::new(),
            iterates,
            last_lq: None,
            last_solution: None,
            last_candidate: None,
            status: Status::Running,
            failure: None,
        })
    }

    pub fn problem(&self) -> &OcProblem {
        &self.problem
    }
    pub fn variant(&self) -> Variant {
        self.variant
    }
    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }
    pub fn partition(&self) -> &IntervalPartition {
        &self.partition
    }
    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }
    pub fn sensitivities(&self) -> &[StageSensitivity] {
        &self.sens
    }
    pub fn cost(&self) -> f64 {
        self.cost
    }
    pub fn defect_l1(&self) -> f64 {
        self.defect_l1
    }
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }
    pub fn status(&self) -> Status {
        self.status
    }
    /// LQ subproblem of the most recent iteration.
    pub fn last_lq(&self) -> Option<&LqSubproblem> {
        self.last_lq.as_ref()
    }
    /// Riccati solution of the most recent iteration.
    pub fn last_solution(&self) -> Option<&RiccatiSolution> {
        self.last_solution.as_ref()
    }
    /// Forward-sweep candidate of the most recent accepted step, before
    /// the interval rollouts.
    pub fn last_candidate(&self) -> Option<&Trajectory> {
        self.last_candidate.as_ref()
    }

    /// Runs one iteration.
    ///
    /// Errors from the LQ solve (non-convexity, cost expansion) are
    /// returned; rollout blow-ups and the divergence guard set the status
    /// and leave the current trajectory untouched.
    pub fn iterate(&mut self) -> Result<IterationOutcome> {
        let start = Instant::now();
        let lq = lq::assemble(&self.problem, &self.traj, &self.sens)?;
        let sol = backward_sweep(&lq, &self.settings.regularization)?;

        let ls = &self.settings.line_search;
        let alphas: Vec<f64> = if ls.enabled { ls.alphas.clone() } else { vec![1.0] };
        let merit0 = self.cost + ls.rho * self.defect_l1;
        let mut accepted = None;
        let mut last_err = None;
        for &alpha in &alphas {
            match self.trial(&lq, &sol, alpha) {
                Ok((cand, rollout, cost)) => {
                    let defect = rollout.trajectory.total_defect();
                    if !ls.enabled || cost + ls.rho * defect < merit0 {
                        accepted = Some((alpha, cand, rollout, cost, defect));
                        break;
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        self.iter += 1;
        self.last_lq = Some(lq);
        self.last_solution = Some(sol);

        let Some((alpha, cand, rollout, cost, defect)) = accepted else {
            let (status, failure) = match last_err {
                Some(e @ Error::Divergence { .. }) if !ls.enabled => (Status::UnstableRollout, e),
                Some(e @ Error::CostEvaluation { .. }) if !ls.enabled => (Status::Diverged, e),
                Some(e @ (Error::Divergence { .. } | Error::CostEvaluation { .. })) => {
                    (Status::Stalled, e)
                }
                Some(e) => return Err(e),
                None => (
                    Status::Stalled,
                    Error::Config("no step size decreased the merit function".into()),
                ),
            };
            return Ok(self.stop(status, failure, start));
        };

        if !(cost.abs() <= self.guard_cost && defect <= self.guard_defect) {
            let failure = Error::Config(format!(
                "divergence guard tripped (cost {cost:e}, defect {defect:e})"
            ));
            return Ok(self.stop(Status::Diverged, failure, start));
        }

        let update_norm = control_update_norm(&rollout.trajectory.controls, &self.traj.controls)?;
        let cost_change = (cost - self.cost).abs();
        let prev_cost = self.cost;
        self.traj = rollout.trajectory;
        self.sens = rollout.sensitivities;
        self.cost = cost;
        self.defect_l1 = defect;
        self.last_candidate = Some(cand);
        if self.settings.keep_iterates {
            self.iterates.push(self.traj.controls.clone());
        }
        let record = IterationRecord {
            iter: self.iter,
            cost,
            defect_l1: defect,
            update_norm,
            alpha,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.records.push(record);

        let cost_settled = cost_change <= self.settings.j_rel_min * cost.abs()
            || (cost_change == 0.0 && prev_cost == cost);
        self.status = if cost_settled && defect < self.settings.d_max {
            Status::Converged
        } else if self.iter >= self.settings.max_iters {
            Status::MaxIters
        } else {
            Status::Running
        };
        Ok(IterationOutcome {
            record,
            status: self.status,
        })
    }

    fn trial(
        &self,
        lq: &LqSubproblem,
        sol: &RiccatiSolution,
        alpha: f64,
    ) -> Result<(Trajectory, sweep::Rollout, f64)> {
        let cand = sweep::forward_sweep(lq, sol, &self.traj, &self.problem.x_init, alpha)?;
        let feedback = self.variant.closed_loop.then_some(RolloutFeedback {
            policy: &sol.policy,
            reference: &self.traj,
            alpha,
        });
        let rollout = sweep::rollout_and_defects(&self.problem, &self.partition, &cand, feedback)?;
        let cost = cost::evaluate(self.problem.cost.as_ref(), &rollout.trajectory)?;
        Ok((cand, rollout, cost))
    }

    fn stop(&mut self, status: Status, failure: Error, start: Instant) -> IterationOutcome {
        self.status = status;
        self.failure = Some(failure);
        IterationOutcome {
            record: IterationRecord {
                iter: self.iter,
                cost: self.cost,
                defect_l1: self.defect_l1,
                update_norm: 0.0,
                alpha: 1.0,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            },
            status,
        }
    }

    /// Iterates until termination, reporting each accepted iteration to
    /// `sink`.
    pub fn run(mut self, mut sink: impl FnMut(&IterationRecord)) -> Result<SolveResult> {
        while self.status == Status::Running {
            let before = self.records.len();
            self.iterate()?;
            if self.records.len() > before {
                sink(self.records.last().expect("record just pushed"));
            }
        }
        Ok(self.into_result())
    }

    pub fn into_result(self) -> SolveResult {
        SolveResult {
            trajectory: self.traj,
            solution: self.last_solution,
            records: self.records,
            status: self.status,
            failure: self.failure,
            control_iterates: self.iterates,
            cost: self.cost,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    /// Riccati solution of the last iteration (holds the final policy).
    pub solution: Option<RiccatiSolution>,
    pub records: Vec<IterationRecord>,
    pub status: Status,
    /// Cause of a non-converged termination, if any.
    pub failure: Option<Error>,
    /// `U[0], U[1], ...` when requested in the settings.
    pub control_iterates: Vec<Vec<Vector>>,
    pub cost: f64,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn policy(&self) -> Option<&FeedbackPolicy> {
        self.solution.as_ref().map(|s| &s.policy)
    }
}

/// Initializes and iterates to termination.
pub fn solve(
    problem: &OcProblem,
    variant: Variant,
    settings: &SolverSettings,
    init: &InitStrategy,
) -> Result<SolveResult> {
    Solver::new(problem.clone(), variant, settings.clone(), init)?.run(|_| {})
}

/// Geometric-mean contraction ratio of `|U[k] - U*|` over the last `last_k`
/// usable iterates, from a least-squares fit of `ln |U[k] - U*|` against `k`.
///
/// Iterates within `1e-12` of `U*` are skipped.
pub fn contraction_rate(iterates: &[Vec<Vector>], u_star: &[Vector], last_k: usize) -> Result<f64> {
    let mut points = Vec::new();
    for (k, u) in iterates.iter().enumerate() {
        let e = control_update_norm(u, u_star)?;
        if e > 1e-12 && e.is_finite() {
            points.push((k as f64, e.ln()));
        }
    }
    let keep = last_k.max(2);
    if points.len() > keep {
        points.drain(..points.len() - keep);
    }
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable iterates, need at least 2",
            points.len()
        )));
    }
    let count = points.len() as f64;
    let mean_k = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_e = points.iter().map(|p| p.1).sum::<f64>() / count;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_k) * (p.1 - mean_e)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_k).powi(2)).sum();
    Ok((sxy / sxx).exp())
}
