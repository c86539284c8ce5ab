//! Real-time NMPC with a split preparation / feedback cycle.
//!
//! Each control cycle runs exactly one Gauss-Newton iteration. The
//! preparation phase rolls out shooting intervals `1..M` and expands the LQ
//! data on their stages before the next measurement arrives. The feedback
//! phase then only re-integrates interval 0 from the measured state, expands
//! its stages, and runs the backward and forward sweeps.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::dynamics::{feedback_control, DynamicsModel, Integrator};
use crate::lq::{self, LqStage, LqSubproblem, LqTerminal};
use crate::problem::{OcProblem, Trajectory};
use crate::riccati::{backward_sweep, FeedbackPolicy, Regularization};
use crate::solver::Variant;
use crate::sweep::{self, IntervalPartition, RolloutFeedback};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpcSettings {
    /// Shift the trajectories by one stage per cycle (duplicating the last
    /// stage) before preparing.
    pub shift: bool,
    #[serde(skip)]
    pub regularization: Regularization,
}

/// Policy published by a feedback phase: `u_n(x) = u_n + L_n (x - x_n)`
/// around the planned trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedPolicy {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub gains: Vec<Matrix>,
    /// Feedforward increments of the sweep that produced the plan.
    pub feedforward: Vec<Vector>,
}

impl PublishedPolicy {
    /// Control for stage `n` at state `x`.
    pub fn control(&self, n: usize, x: &Vector) -> Vector {
        let n = n.min(self.controls.len() - 1);
        &self.controls[n] + &self.gains[n] * (x - &self.states[n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackLatency {
    pub feedback_ms: f64,
    /// Whether the cycle failed and the previous policy was kept.
    pub fallback: bool,
}

/// Controller state between phases.
#[derive(Debug, Clone)]
pub struct NmpcController {
    problem: OcProblem,
    variant: Variant,
    partition: IntervalPartition,
    settings: NmpcSettings,
    /// Current iterate; intervals `1..M` are rolled out, interval 0 holds
    /// the plan.
    traj: Trajectory,
    gains: Vec<Matrix>,
    prepared: Vec<Option<LqStage>>,
    prepared_terminal: Option<LqTerminal>,
    published: Option<PublishedPolicy>,
    pending: Option<PublishedPolicy>,
    cycle: usize,
}

impl NmpcController {
    /// Controller warm-started from `states`, `controls` and optional
    /// feedback `gains` (zero gains when `None`). Prepares intervals `1..M`.
    pub fn new(
        problem: OcProblem,
        variant: Variant,
        settings: NmpcSettings,
        states: Vec<Vector>,
        controls: Vec<Vector>,
        gains: Option<Vec<Matrix>>,
    ) -> Result<Self> {
        let (n, m, p) = (problem.horizon, problem.state_dim(), problem.control_dim());
        let traj = Trajectory::from_parts(states, controls)?;
        traj.check_dims(m, p, n)?;
        let gains = gains.unwrap_or_else(|| vec![Matrix::zeros(p, m); n]);
        if gains.len() != n {
            return Err(Error::dim("gain sequence", n, gains.len()));
        }
        let partition = variant.partition(n)?;
        let mut ctrl = Self {
            problem,
            variant,
            partition,
            settings,
            traj,
            gains,
            prepared: vec![None; n],
            prepared_terminal: None,
            published: None,
            pending: None,
            cycle: 0,
        };
        ctrl.prepare_intervals()?;
        Ok(ctrl)
    }

    pub fn problem(&self) -> &OcProblem {
        &self.problem
    }
    pub fn variant(&self) -> Variant {
        self.variant
    }
    pub fn partition(&self) -> &IntervalPartition {
        &self.partition
    }
    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }
    /// Most recently published policy.
    pub fn published(&self) -> Option<&PublishedPolicy> {
        self.published.as_ref()
    }
    /// Prepared LQ stages (`None` for interval 0, filled by the feedback
    /// phase).
    pub fn prepared_stages(&self) -> &[Option<LqStage>] {
        &self.prepared
    }
    pub fn cycle(&self) -> usize {
        self.cycle
    }

    /// Re-anchors on `x_meas`, completes the LQ data with interval 0 and
    /// solves it. The new policy is published; on failure the previous
    /// policy stays published and the error is returned.
    pub fn feedback_step(&mut self, x_meas: &Vector) -> Result<(PublishedPolicy, FeedbackLatency)> {
        let start = Instant::now();
        let result = self.feedback_inner(x_meas);
        let feedback_ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(policy) => {
                self.published = Some(policy.clone());
                self.pending = Some(policy.clone());
                Ok((
                    policy,
                    FeedbackLatency {
                        feedback_ms,
                        fallback: false,
                    },
                ))
            }
            Err(e) => Err(e),
        }
    }

    fn feedback_inner(&self, x_meas: &Vector) -> Result<PublishedPolicy> {
        let (n, m) = (self.problem.horizon, self.problem.state_dim());
        if x_meas.len() != m {
            return Err(Error::dim("measured state", m, x_meas.len()));
        }
        let zero_ff = vec![Vector::zeros(self.problem.control_dim()); n];
        let policy = FeedbackPolicy {
            feedforward: zero_ff,
            gains: self.gains.clone(),
        };
        let mut anchored = self.traj.clone();
        anchored.states[0] = x_meas.clone();
        anchored.controls[0] = feedback_control(
            &self.traj.controls[0],
            &policy.feedforward[0],
            &self.gains[0],
            x_meas,
            &self.traj.states[0],
            1.0,
        );
        let feedback = self.variant.closed_loop.then_some(RolloutFeedback {
            policy: &policy,
            reference: &self.traj,
            alpha: 1.0,
        });
        let (sens, rolled) =
            sweep::rollout_partial(&self.problem, &self.partition, &anchored, feedback, &[0])?;

        let cost = self.problem.cost.as_ref();
        let len0 = self.partition.lengths[0];
        let mut stages = Vec::with_capacity(n);
        for k in 0..n {
            if k < len0 {
                let s = sens[k].as_ref().expect("interval 0 was rolled out");
                let e = cost::quadratize_stage(cost, &rolled.states[k], &rolled.controls[k], k)?;
                stages.push(lq::stage_from(s, &rolled.defects[k], e));
            } else {
                stages.push(self.prepared[k].clone().ok_or_else(|| {
                    Error::Config(format!("stage {k} has not been prepared"))
                })?);
            }
        }
        let terminal = match (&self.prepared_terminal, self.partition.lifts_terminal_state()) {
            (Some(t), true) => t.clone(),
            _ => lq::terminal_from(cost::quadratize_terminal(cost, &rolled.states[n], n)?),
        };
        let lq = LqSubproblem { stages, terminal };
        let sol = backward_sweep(&lq, &self.settings.regularization)?;
        let plan = sweep::forward_sweep(&lq, &sol, &rolled, x_meas, 1.0)?;
        Ok(PublishedPolicy {
            states: plan.states,
            controls: plan.controls,
            gains: sol.policy.gains,
            feedforward: sol.policy.feedforward,
        })
    }

    /// Adopts the policy published this cycle and prepares intervals
    /// `1..M` for the next measurement. Without a fresh publication the
    /// prepared data is left as is.
    pub fn preparation_step(&mut self) -> Result<()> {
        let Some(policy) = self.pending.take() else {
            return Ok(());
        };
        let previous = (self.traj.clone(), self.gains.clone());
        self.traj = Trajectory::from_parts(policy.states, policy.controls)?;
        self.gains = policy.gains;
        if self.settings.shift {
            shift_left(&mut self.traj.states);
            shift_left(&mut self.traj.controls);
            shift_left(&mut self.gains);
        }
        self.cycle += 1;
        if let Err(e) = self.prepare_intervals() {
            (self.traj, self.gains) = previous;
            return Err(e);
        }
        Ok(())
    }

    fn prepare_intervals(&mut self) -> Result<()> {
        let n = self.problem.horizon;
        let which: Vec<usize> = (1..self.partition.count()).collect();
        let policy = FeedbackPolicy {
            feedforward: vec![Vector::zeros(self.problem.control_dim()); n],
            gains: self.gains.clone(),
        };
        let feedback = self.variant.closed_loop.then_some(RolloutFeedback {
            policy: &policy,
            reference: &self.traj,
            alpha: 1.0,
        });
        let (sens, rolled) =
            sweep::rollout_partial(&self.problem, &self.partition, &self.traj, feedback, &which)?;
        let cost = self.problem.cost.as_ref();
        let mut prepared = vec![None; n];
        for (k, s) in sens.iter().enumerate() {
            if let Some(s) = s {
                let e = cost::quadratize_stage(cost, &rolled.states[k], &rolled.controls[k], k)?;
                prepared[k] = Some(lq::stage_from(s, &rolled.defects[k], e));
            }
        }
        self.prepared_terminal = if self.partition.lifts_terminal_state() {
            Some(lq::terminal_from(cost::quadratize_terminal(
                cost,
                &rolled.states[n],
                n,
            )?))
        } else {
            None
        };
        self.prepared = prepared;
        self.traj = rolled;
        Ok(())
    }
}

fn shift_left<T: Clone>(v: &mut Vec<T>) {
    if v.len() > 1 {
        v.remove(0);
        v.push(v.last().expect("nonempty").clone());
    }
}

/// Simulated plant with optional Gaussian process noise.
pub struct Plant {
    pub dynamics: Arc<dyn DynamicsModel>,
    pub integrator: Integrator,
    pub state: Vector,
    /// Standard deviation of the additive state noise per step.
    pub noise_std: f64,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(
        dynamics: Arc<dyn DynamicsModel>,
        integrator: Integrator,
        state: Vector,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if state.len() != dynamics.state_dim() {
            return Err(Error::dim("plant state", dynamics.state_dim(), state.len()));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(Self {
            dynamics,
            integrator,
            state,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn step(&mut self, u: &Vector) -> Result<()> {
        let mut next = self.integrator.step(self.dynamics.as_ref(), &self.state, u)?;
        if self.noise_std > 0.0 {
            for v in next.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut self.rng);
                *v += self.noise_std * w;
            }
        }
        self.state = next;
        Ok(())
    }
}

/// One row of the cycle log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub t_sim: f64,
    pub x_meas: Vec<f64>,
    pub u_applied: Vec<f64>,
    pub cost_stage: f64,
    pub feedback_ms: f64,
    pub prep_ms: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopReport {
    pub cycles: Vec<CycleRecord>,
    /// Sum of the running cost along the executed trajectory.
    pub accumulated_cost: f64,
    /// Mean wall time of feedback plus preparation.
    pub mean_cycle_ms: f64,
    pub frequency_hz: f64,
    pub final_state: Vector,
    /// Plant divergence that ended the run early.
    pub aborted: Option<Error>,
}

/// Simulates `measure -> feedback -> apply -> prepare` for `duration`
/// seconds of plant time, one controller stage per cycle.
pub fn run_closed_loop(
    plant: &mut Plant,
    controller: &mut NmpcController,
    duration: f64,
) -> Result<ClosedLoopReport> {
    let dt = controller.problem().dt();
    if (plant.integrator.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::Config(format!(
            "plant step {} differs from controller step {dt}",
            plant.integrator.dt
        )));
    }
    if !(duration >= 0.0) {
        return Err(Error::Config("duration must be nonnegative".into()));
    }
    let n_cycles = (duration / dt).round() as usize;
    let cost = controller.problem().cost.clone();
    let mut cycles = Vec::with_capacity(n_cycles);
    let mut accumulated = 0.0;
    let mut aborted = None;
    let mut since_publish = 0usize;
    for k in 0..n_cycles {
        let x_meas = plant.state.clone();
        let (u, latency) = match controller.feedback_step(&x_meas) {
            Ok((policy, lat)) => {
                since_publish = 0;
                (policy.controls[0].clone(), lat)
            }
            Err(_) => {
                since_publish += 1;
                let fallback = controller.published().ok_or_else(|| {
                    Error::Config("first NMPC cycle failed without a fallback policy".into())
                })?;
                let stage = if controller.settings.shift { since_publish } else { 0 };
                (
                    fallback.control(stage, &x_meas),
                    FeedbackLatency {
                        feedback_ms: 0.0,
                        fallback: true,
                    },
                )
            }
        };
        let stage_cost = cost.running(&x_meas, &u, 0);
        accumulated += stage_cost;
        let prep_start = Instant::now();
        // a failed preparation keeps the previously prepared data
        let prep_ok = controller.preparation_step().is_ok();
        let prep_ms = prep_start.elapsed().as_secs_f64() * 1e3;
        cycles.push(CycleRecord {
            cycle: k,
            t_sim: k as f64 * dt,
            x_meas: x_meas.as_slice().to_vec(),
            u_applied: u.as_slice().to_vec(),
            cost_stage: stage_cost,
            feedback_ms: latency.feedback_ms,
            prep_ms,
            fallback: latency.fallback || !prep_ok,
        });
        if let Err(e) = plant.step(&u) {
            aborted = Some(e);
            break;
        }
    }
    let mean_cycle_ms = if cycles.is_empty() {
        0.0
    } else {
        cycles.iter().map(|c| c.feedback_ms + c.prep_ms).sum::<f64>() / cycles.len() as f64
    };
    Ok(ClosedLoopReport {
        cycles,
        accumulated_cost: accumulated,
        mean_cycle_ms,
        frequency_hz: if mean_cycle_ms > 0.0 { 1e3 / mean_cycle_ms } else { 0.0 },
        final_state: plant.state.clone(),
        aborted,
    })
}
