//! Discrete flow maps over one control stage and their exact sensitivities.
//!
//! Continuous dynamics `dx/dt = f(x, u)` are integrated with a fixed-step
//! explicit scheme under a zero-order hold on `u`. The stage Jacobians
//! `A = dF/dx`, `B = dF/du` are obtained by chain-ruling `df/dx`, `df/du`
//! through every stage of the integrator, so they are exact derivatives of
//! the discrete map that the rollouts actually evaluate.

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

/// Continuous-time vector field.
///
/// Implementations must be deterministic and free of side effects; rollouts
/// call them concurrently from several threads.
pub trait DynamicsModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `dx/dt` at `(x, u)`.
    fn flow(&self, x: &Vector, u: &Vector) -> Vector;

    /// `(df/dx, df/du)` at `(x, u)`.
    ///
    /// The default uses central differences; models with analytic
    /// derivatives should override it.
    fn flow_jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix) {
        central_difference_jacobians(self, x, u)
    }
}

pub fn central_difference_jacobians<D: DynamicsModel + ?Sized>(
    model: &D,
    x: &Vector,
    u: &Vector,
) -> (Matrix, Matrix) {
    let m = model.state_dim();
    let p = model.control_dim();
    let mut jx = Matrix::zeros(m, m);
    let mut ju = Matrix::zeros(m, p);
    for i in 0..m {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let col = (model.flow(&xp, u) - model.flow(&xm, u)) / (2.0 * h);
        jx.set_column(i, &col);
    }
    for i in 0..p {
        let h = 1e-6 * u[i].abs().max(1.0);
        let (mut up, mut um) = (u.clone(), u.clone());
        up[i] += h;
        um[i] -= h;
        let col = (model.flow(x, &up) - model.flow(x, &um)) / (2.0 * h);
        ju.set_column(i, &col);
    }
    (jx, ju)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Fixed-step integrator for one control stage of length `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub scheme: Scheme,
    pub dt: f64,
    pub substeps: usize,
}

impl Integrator {
    pub fn new(scheme: Scheme, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(Self {
            scheme,
            dt,
            substeps,
        })
    }

    pub fn rk4(dt: f64) -> Self {
        Self {
            scheme: Scheme::Rk4,
            dt,
            substeps: 1,
        }
    }

    pub fn euler(dt: f64) -> Self {
        Self {
            scheme: Scheme::Euler,
            dt,
            substeps: 1,
        }
    }

    /// Integrates one control stage.
    pub fn step(&self, model: &dyn DynamicsModel, x: &Vector, u: &Vector) -> Result<Vector> {
        self.propagate(model, x, u, false).map(|(x, _)| x)
    }

    /// Integrates one control stage and returns the discrete sensitivities.
    ///
    /// The returned state is bit-identical to [`Integrator::step`].
    pub fn step_with_sensitivity(
        &self,
        model: &dyn DynamicsModel,
        x: &Vector,
        u: &Vector,
    ) -> Result<(Vector, StageSensitivity)> {
        let (x_next, sens) = self.propagate(model, x, u, true)?;
        Ok((x_next, sens.expect("sensitivities requested")))
    }

    fn propagate(
        &self,
        model: &dyn DynamicsModel,
        x0: &Vector,
        u: &Vector,
        with_sens: bool,
    ) -> Result<(Vector, Option<StageSensitivity>)> {
        let m = model.state_dim();
        if x0.len() != m {
            return Err(Error::dim("state vector", m, x0.len()));
        }
        if u.len() != model.control_dim() {
            return Err(Error::dim("control vector", model.control_dim(), u.len()));
        }
        let h = self.dt / self.substeps as f64;
        let eye = Matrix::identity(m, m);
        let mut x = x0.clone();
        let mut sens = with_sens.then(|| StageSensitivity {
            a: eye.clone(),
            b: Matrix::zeros(m, u.len()),
        });

        for _ in 0..self.substeps {
            let (x_next, local) = match self.scheme {
                Scheme::Euler => {
                    let k1 = model.flow(&x, u);
                    let local = with_sens.then(|| {
                        let (jx, ju) = model.flow_jacobians(&x, u);
                        (&eye + jx * h, ju * h)
                    });
                    (&x + k1 * h, local)
                }
                Scheme::Rk4 => {
                    let k1 = model.flow(&x, u);
                    let x2 = &x + &k1 * (0.5 * h);
                    let k2 = model.flow(&x2, u);
                    let x3 = &x + &k2 * (0.5 * h);
                    let k3 = model.flow(&x3, u);
                    let x4 = &x + &k3 * h;
                    let k4 = model.flow(&x4, u);
                    let x_next = &x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);

                    let local = with_sens.then(|| {
                        // d(k_i)/d(x, u) at the substep start
                        let (j1x, j1u) = model.flow_jacobians(&x, u);
                        let (j2x, j2u) = model.flow_jacobians(&x2, u);
                        let (j3x, j3u) = model.flow_jacobians(&x3, u);
                        let (j4x, j4u) = model.flow_jacobians(&x4, u);
                        let k1x = j1x;
                        let k1u = j1u;
                        let k2x = &j2x * (&eye + &k1x * (0.5 * h));
                        let k2u = &j2x * (&k1u * (0.5 * h)) + j2u;
                        let k3x = &j3x * (&eye + &k2x * (0.5 * h));
                        let k3u = &j3x * (&k2u * (0.5 * h)) + j3u;
                        let k4x = &j4x * (&eye + &k3x * h);
                        let k4u = &j4x * (&k3u * h) + j4u;
                        let ax = &eye + (k1x + (k2x + k3x) * 2.0 + k4x) * (h / 6.0);
                        let bu = (k1u + (k2u + k3u) * 2.0 + k4u) * (h / 6.0);
                        (ax, bu)
                    });
                    (x_next, local)
                }
            };
            if !x_next.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    stage: 0,
                    interval: None,
                });
            }
            if let (Some(s), Some((ax, bu))) = (sens.as_mut(), local) {
                s.b = &ax * &s.b + bu;
                s.a = ax * &s.a;
            }
            x = x_next;
        }
        if let Some(s) = &sens {
            if !(s.a.iter().all(|v| v.is_finite()) && s.b.iter().all(|v| v.is_finite())) {
                return Err(Error::Divergence {
                    stage: 0,
                    interval: None,
                });
            }
        }
        Ok((x, sens))
    }
}

/// Jacobians of the discrete stage map.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSensitivity {
    /// `dF/dx`, m x m
    pub a: Matrix,
    /// `dF/du`, m x p
    pub b: Matrix,
}

/// Affine control law `u_ref + alpha * l + L (x - x_ref)`.
///
/// Shared by the linear forward sweep and the closed-loop rollouts so that
/// both evaluate the feedback with identical floating-point operations.
pub fn feedback_control(
    u_ref: &Vector,
    feedforward: &Vector,
    gain: &Matrix,
    x: &Vector,
    x_ref: &Vector,
    alpha: f64,
) -> Vector {
    u_ref + feedforward * alpha + gain * (x - x_ref)
}

/// Time-varying feedback law applied inside an interval rollout.
///
/// All slices are indexed relative to the interval start.
#[derive(Debug, Clone, Copy)]
pub struct IntervalFeedback<'a> {
    pub feedforward: &'a [Vector],
    pub gains: &'a [Matrix],
    pub x_ref: &'a [Vector],
    pub u_ref: &'a [Vector],
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct IntervalRollout {
    /// Visited states, starting with `x_start`; one longer than `controls`.
    pub states: Vec<Vector>,
    /// Controls actually applied.
    pub controls: Vec<Vector>,
    /// Stage sensitivities, empty unless requested.
    pub sensitivities: Vec<StageSensitivity>,
}

/// Integrates one shooting interval.
///
/// Without feedback the stored `controls` are applied. With feedback the
/// first stage still uses `controls[0]`, whose feedback correction is
/// already contained in `x_start`; every later stage applies the affine law
/// around the reference trajectory. Divergence errors carry the stage index
/// relative to the interval start.
pub fn rollout_interval(
    model: &dyn DynamicsModel,
    integrator: &Integrator,
    x_start: &Vector,
    controls: &[Vector],
    feedback: Option<&IntervalFeedback<'_>>,
    with_sensitivity: bool,
) -> Result<IntervalRollout> {
    let len = controls.len();
    if let Some(fb) = feedback {
        let short = [
            fb.feedforward.len(),
            fb.gains.len(),
            fb.x_ref.len(),
            fb.u_ref.len(),
        ]
        .into_iter()
        .min()
        .unwrap_or(0);
        if short < len {
            return Err(Error::dim("interval feedback", len, short));
        }
    }
    let mut states = Vec::with_capacity(len + 1);
    let mut applied = Vec::with_capacity(len);
    let mut sensitivities = Vec::with_capacity(if with_sensitivity { len } else { 0 });
    let mut x = x_start.clone();
    for j in 0..len {
        let u = match feedback {
            Some(fb) if j > 0 => feedback_control(
                &fb.u_ref[j],
                &fb.feedforward[j],
                &fb.gains[j],
                &x,
                &fb.x_ref[j],
                fb.alpha,
            ),
            _ => controls[j].clone(),
        };
        let x_next = if with_sensitivity {
            let (x_next, s) = integrator
                .step_with_sensitivity(model, &x, &u)
                .map_err(|e| e.at(j, None))?;
            sensitivities.push(s);
            x_next
        } else {
            integrator.step(model, &x, &u).map_err(|e| e.at(j, None))?
        };
        states.push(std::mem::replace(&mut x, x_next));
        applied.push(u);
    }
    states.push(x);
    Ok(IntervalRollout {
        states,
        controls: applied,
        sensitivities,
    })
}
