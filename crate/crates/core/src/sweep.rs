//! Linear forward sweep, shooting-interval rollouts and defects.

use rayon::prelude::*;

use crate::dynamics::{feedback_control, rollout_interval, IntervalFeedback, StageSensitivity};
use crate::lq::LqSubproblem;
use crate::problem::{OcProblem, Trajectory};
use crate::riccati::{FeedbackPolicy, RiccatiSolution};
use crate::{Error, Result, Vector};

/// Split of the horizon `0..N` into shooting intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalPartition {
    pub horizon: usize,
    pub starts: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl IntervalPartition {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// `(start, length)` per interval.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().copied().zip(self.lengths.iter().copied())
    }

    /// Whether `x_N` is a decision variable.
    ///
    /// With a single interval the rollout covers the whole horizon and
    /// overwrites `x_N`, so every defect vanishes (single shooting, iLQR).
    /// With two or more intervals `x_N` stays lifted and the last interval
    /// reports a defect against it.
    pub fn lifts_terminal_state(&self) -> bool {
        self.count() > 1
    }

    /// Stages whose defect may be nonzero.
    pub fn defect_stages(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.intervals().map(|(i, l)| i + l - 1).collect();
        if !self.lifts_terminal_state() {
            v.pop();
        }
        v
    }

    /// Interval containing `stage`.
    pub fn interval_of(&self, stage: usize) -> usize {
        match self.starts.binary_search(&stage) {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }
}

/// Splits `horizon` stages into `intervals` pieces; the first
/// `horizon % intervals` pieces get one extra stage.
pub fn partition(horizon: usize, intervals: usize) -> Result<IntervalPartition> {
    if intervals < 1 || intervals > horizon {
        return Err(Error::Config(format!(
            "number of shooting intervals must be in 1..={horizon}, got {intervals}"
        )));
    }
    let base = horizon / intervals;
    let extra = horizon % intervals;
    let lengths: Vec<usize> = (0..intervals)
        .map(|k| if k < extra { base + 1 } else { base })
        .collect();
    let starts = lengths
        .iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect();
    Ok(IntervalPartition {
        horizon,
        starts,
        lengths,
    })
}

/// Candidate decision variables from the LQ increments, scaled by `alpha`.
///
/// ```text
/// u_n+ = u_n + alpha l_n + L_n (x_n+ - x_n)
/// x_{n+1}+ = x_{n+1} + (A_n + B_n L_n)(x_n+ - x_n) + alpha (B_n l_n + d_n)
/// ```
///
/// with `x_0+ = x_init`. The candidate's defects are the LQ-predicted
/// remainders `(1 - alpha) d_n`.
pub fn forward_sweep(
    lq: &LqSubproblem,
    sol: &RiccatiSolution,
    old: &Trajectory,
    x_init: &Vector,
    alpha: f64,
) -> Result<Trajectory> {
    let n = lq.horizon();
    if old.horizon() != n {
        return Err(Error::dim("trajectory horizon", n, old.horizon()));
    }
    if sol.horizon() != n {
        return Err(Error::dim("Riccati solution horizon", n, sol.horizon()));
    }
    if x_init.len() != lq.state_dim() {
        return Err(Error::dim("x_init", lq.state_dim(), x_init.len()));
    }
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(x_init.clone());
    for k in 0..n {
        let st = &lq.stages[k];
        let l = &sol.policy.feedforward[k];
        let gain = &sol.policy.gains[k];
        let dx = &states[k] - &old.states[k];
        let u = feedback_control(&old.controls[k], l, gain, &states[k], &old.states[k], alpha);
        let closed = &st.a + &st.b * gain;
        let x_next = &old.states[k + 1] + closed * dx + (&st.b * l + &st.defect) * alpha;
        controls.push(u);
        states.push(x_next);
    }
    let defects = lq
        .stages
        .iter()
        .map(|s| &s.defect * (1.0 - alpha))
        .collect();
    Ok(Trajectory {
        states,
        controls,
        defects,
    })
}

/// Closed-loop reference for [`rollout_and_defects`]: the policy together
/// with the trajectory its increments are measured from.
#[derive(Debug, Clone, Copy)]
pub struct RolloutFeedback<'a> {
    pub policy: &'a FeedbackPolicy,
    pub reference: &'a Trajectory,
    pub alpha: f64,
}

/// Rolled-out trajectory together with the stage sensitivities evaluated
/// along it.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub sensitivities: Vec<StageSensitivity>,
}

/// Integrates every shooting interval from the candidate's interval-start
/// states, overwrites interior states (and, in closed loop, interior
/// controls) and measures the defects at interval ends.
///
/// With `feedback = None` the candidate's stored controls are applied
/// open-loop. Intervals are integrated in parallel on the current rayon
/// pool and merged in interval order.
pub fn rollout_and_defects(
    problem: &OcProblem,
    partition: &IntervalPartition,
    candidate: &Trajectory,
    feedback: Option<RolloutFeedback<'_>>,
) -> Result<Rollout> {
    let intervals: Vec<usize> = (0..partition.count()).collect();
    let (sens, trajectory) = rollout_partial(problem, partition, candidate, feedback, &intervals)?;
    let sensitivities = sens
        .into_iter()
        .map(|s| s.expect("every interval was rolled out"))
        .collect();
    Ok(Rollout {
        trajectory,
        sensitivities,
    })
}

/// Rolls out only the listed intervals; stages of other intervals keep the
/// candidate's values and get `None` sensitivities.
pub(crate) fn rollout_partial(
    problem: &OcProblem,
    partition: &IntervalPartition,
    candidate: &Trajectory,
    feedback: Option<RolloutFeedback<'_>>,
    which: &[usize],
) -> Result<(Vec<Option<StageSensitivity>>, Trajectory)> {
    let n = problem.horizon;
    if partition.horizon != n {
        return Err(Error::dim("partition horizon", n, partition.horizon));
    }
    candidate.check_dims(problem.state_dim(), problem.control_dim(), n)?;
    if let Some(fb) = &feedback {
        if fb.policy.horizon() != n {
            return Err(Error::dim("policy horizon", n, fb.policy.horizon()));
        }
        if fb.reference.horizon() != n {
            return Err(Error::dim("reference horizon", n, fb.reference.horizon()));
        }
    }

    let model = problem.dynamics.as_ref();
    let integ = &problem.integrator;
    let run = |&k: &usize| {
        let (start, len) = (partition.starts[k], partition.lengths[k]);
        let range = start..start + len;
        let interval_fb = feedback.as_ref().map(|fb| IntervalFeedback {
            feedforward: &fb.policy.feedforward[range.clone()],
            gains: &fb.policy.gains[range.clone()],
            x_ref: &fb.reference.states[range.clone()],
            u_ref: &fb.reference.controls[range.clone()],
            alpha: fb.alpha,
        });
        let controls = &candidate.controls[range.clone()];
        rollout_interval(model, integ, &candidate.states[start], controls, interval_fb.as_ref(), true)
            .map(|r| (k, r))
            .map_err(|e| match e {
                Error::Divergence { stage, .. } => Error::Divergence {
                    stage: start + stage,
                    interval: Some(k),
                },
                other => other,
            })
    };

    let results: Vec<_> = if which.len() > 1 {
        which.par_iter().with_min_len(1).map(run).collect::<Result<Vec<_>>>()?
    } else {
        which.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let mut traj = candidate.clone();
    let mut sens: Vec<Option<StageSensitivity>> = vec![None; n];
    let lift_terminal = partition.lifts_terminal_state();
    for (k, r) in results {
        let (start, len) = (partition.starts[k], partition.lengths[k]);
        if k == 0 {
            traj.states[0] = r.states[0].clone();
        }
        for j in 0..len {
            let stage = start + j;
            traj.controls[stage] = r.controls[j].clone();
            traj.defects[stage] = Vector::zeros(problem.state_dim());
            if j + 1 < len {
                traj.states[stage + 1] = r.states[j + 1].clone();
            }
        }
        let end = start + len;
        let x_end = &r.states[len];
        if end == n && !lift_terminal {
            traj.states[n] = x_end.clone();
        } else {
            traj.defects[end - 1] = x_end - &candidate.states[end];
        }
        for (j, s) in r.sensitivities.into_iter().enumerate() {
            sens[start + j] = Some(s);
        }
    }
    Ok((sens, traj))
}
