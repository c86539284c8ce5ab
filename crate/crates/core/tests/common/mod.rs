//! Helpers shared by the integration tests: random LQ instances, consistent
//! initial guesses and straightforward reference implementations of single
//! shooting, iLQR and GNMS written independently of the library's sweeps.

#![allow(dead_code)]

use std::sync::Arc;

use gnshoot::cost::{StageExpansion, TerminalExpansion};
use gnshoot::lq::{LqStage, LqSubproblem, LqTerminal};
use gnshoot::{CostModel, InitStrategy, Matrix, OcProblem, Trajectory, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, w: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-w..w))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, w: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-w..w))
}

/// Random strictly convex LQ instance with cross terms and defects.
pub fn random_lq(rng: &mut ChaCha8Rng, m: usize, p: usize, n: usize) -> LqSubproblem {
    let stages = (0..n)
        .map(|_| {
            let w = rand_mat(rng, m + p, m + p, 1.0);
            let joint = &w * w.transpose() + Matrix::identity(m + p, m + p) * 0.1;
            LqStage {
                a: rand_mat(rng, m, m, 1.0) + Matrix::identity(m, m),
                b: rand_mat(rng, m, p, 1.0),
                defect: rand_vec(rng, m, 0.5),
                constant: rng.random_range(0.0..1.0),
                state_grad: rand_vec(rng, m, 1.0),
                control_grad: rand_vec(rng, p, 1.0),
                state_hess: joint.view((0, 0), (m, m)).into_owned(),
                control_hess: joint.view((m, m), (p, p)).into_owned(),
                cross: joint.view((m, 0), (p, m)).into_owned(),
            }
        })
        .collect();
    let w = rand_mat(rng, m, m, 1.0);
    LqSubproblem {
        stages,
        terminal: LqTerminal {
            constant: rng.random_range(0.0..1.0),
            state_grad: rand_vec(rng, m, 1.0),
            state_hess: &w * w.transpose() + Matrix::identity(m, m) * 0.1,
        },
    }
}

/// Open-loop rollout of `controls` from `x_init`.
pub fn rollout(problem: &OcProblem, controls: &[Vector]) -> Vec<Vector> {
    let model = problem.dynamics.as_ref();
    let mut xs = vec![problem.x_init.clone()];
    for u in controls {
        let x = problem.integrator.step(model, xs.last().unwrap(), u).unwrap();
        xs.push(x);
    }
    xs
}

/// Dynamically consistent initial guess from the given controls.
pub fn consistent_init(problem: &OcProblem, controls: Vec<Vector>) -> InitStrategy {
    InitStrategy::Provided {
        states: rollout(problem, &controls),
        controls,
    }
}

/// Dynamically consistent guess from a state-feedback rollout; the applied
/// controls are stored.
pub fn feedback_init(problem: &OcProblem, law: impl Fn(usize, &Vector) -> Vector) -> InitStrategy {
    let model = problem.dynamics.as_ref();
    let mut states = vec![problem.x_init.clone()];
    let mut controls = Vec::with_capacity(problem.horizon);
    for k in 0..problem.horizon {
        let u = law(k, &states[k]);
        let x = problem.integrator.step(model, &states[k], &u).unwrap();
        controls.push(u);
        states.push(x);
    }
    InitStrategy::Provided { states, controls }
}

/// Consistent guess used by the limit-case tests: a small sinusoid around
/// `u_bias`.
pub fn wavy_controls(problem: &OcProblem, u_bias: f64, amp: f64) -> Vec<Vector> {
    let p = problem.control_dim();
    (0..problem.horizon)
        .map(|k| Vector::from_element(p, u_bias + amp * (0.1 * k as f64).sin()))
        .collect()
}

/// Max abs difference between two vector sequences, relative to the larger
/// magnitude (at least 1).
pub fn rel_diff(a: &[Vector], b: &[Vector]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).amax());
        scale = scale.max(x.amax()).max(y.amax());
    }
    diff / scale
}

/// Reference algorithm written stage by stage with plain matrix inverses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMethod {
    /// Linear forward sweep for the controls, then one open-loop rollout.
    SingleShooting,
    /// Closed-loop rollout of `u + l + L (x - x_old)`.
    Ilqr,
    /// Full linear update of states and controls; every stage lifted.
    Gnms,
}

/// Straight implementation of one full Gauss-Newton step.
pub fn reference_step(problem: &OcProblem, xs: &[Vector], us: &[Vector], method: RefMethod) -> (Vec<Vector>, Vec<Vector>) {
    let n = problem.horizon;
    let model = problem.dynamics.as_ref();
    let cost = problem.cost.as_ref();

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for k in 0..n {
        let (x_next, s) = problem.integrator.step_with_sensitivity(model, &xs[k], &us[k]).unwrap();
        a.push(s.a);
        b.push(s.b);
        d.push(x_next - &xs[k + 1]);
    }

    let term = cost.expand_terminal(&xs[n]);
    let mut s_mat = term.state_hess;
    let mut s_vec = term.state_grad;
    let mut ff = vec![Vector::zeros(0); n];
    let mut gain = vec![Matrix::zeros(0, 0); n];
    for k in (0..n).rev() {
        let e = cost.expand_running(&xs[k], &us[k], k);
        let sd = &s_vec + &s_mat * &d[k];
        let h = &e.control_grad + b[k].transpose() * &sd;
        let g = &e.cross + b[k].transpose() * &s_mat * &a[k];
        let hh = &e.control_hess + b[k].transpose() * &s_mat * &b[k];
        let hinv = hh.clone().try_inverse().expect("convex stage");
        let l = -&hinv * &h;
        let lg = -&hinv * &g;
        let new_s = &e.state_hess + a[k].transpose() * &s_mat * &a[k]
            + lg.transpose() * &hh * &lg
            + lg.transpose() * &g
            + g.transpose() * &lg;
        let new_v = &e.state_grad + a[k].transpose() * &sd
            + lg.transpose() * &hh * &l
            + lg.transpose() * &h
            + g.transpose() * &l;
        s_mat = (&new_s + new_s.transpose()) * 0.5;
        s_vec = new_v;
        ff[k] = l;
        gain[k] = lg;
    }

    match method {
        RefMethod::Ilqr => {
            let mut x_new = vec![problem.x_init.clone()];
            let mut u_new = Vec::with_capacity(n);
            for k in 0..n {
                let u = &us[k] + &ff[k] + &gain[k] * (&x_new[k] - &xs[k]);
                x_new.push(problem.integrator.step(model, &x_new[k], &u).unwrap());
                u_new.push(u);
            }
            (x_new, u_new)
        }
        RefMethod::SingleShooting | RefMethod::Gnms => {
            let mut dx = problem.x_init.clone() - &xs[0];
            let mut x_new = vec![problem.x_init.clone()];
            let mut u_new = Vec::with_capacity(n);
            for k in 0..n {
                let du = &ff[k] + &gain[k] * &dx;
                let next = &a[k] * &dx + &b[k] * &du + &d[k];
                u_new.push(&us[k] + du);
                x_new.push(&xs[k + 1] + &next);
                dx = next;
            }
            if method == RefMethod::SingleShooting {
                x_new = rollout(problem, &u_new);
            }
            (x_new, u_new)
        }
    }
}

/// Smooth non-quadratic cost with cross terms, for derivative checks:
/// `L(x, u) = sum cos(x_i) u_j w_ij + 0.5 |u|^2 + sum x_i^4 / 4`,
/// `Phi(x) = sum exp(0.1 x_i)`.
#[derive(Debug, Clone)]
pub struct CouplingCost {
    pub w: Matrix,
}

impl CostModel for CouplingCost {
    fn running(&self, x: &Vector, u: &Vector, _stage: usize) -> f64 {
        let cx = x.map(f64::cos);
        u.dot(&(&self.w * &cx)) + 0.5 * u.norm_squared() + x.iter().map(|v| v.powi(4) / 4.0).sum::<f64>()
    }

    fn terminal(&self, x: &Vector) -> f64 {
        x.iter().map(|v| (0.1 * v).exp()).sum()
    }

    fn expand_running(&self, x: &Vector, u: &Vector, stage: usize) -> StageExpansion {
        let cx = x.map(f64::cos);
        let sx = x.map(f64::sin);
        let wt_u = self.w.transpose() * u;
        let state_grad = Vector::from_fn(x.len(), |i, _| -sx[i] * wt_u[i] + x[i].powi(3));
        let control_grad = &self.w * &cx + u;
        let state_hess = Matrix::from_fn(x.len(), x.len(), |i, j| {
            if i == j {
                -cx[i] * wt_u[i] + 3.0 * x[i] * x[i]
            } else {
                0.0
            }
        });
        let cross = Matrix::from_fn(u.len(), x.len(), |j, i| -sx[i] * self.w[(j, i)]);
        StageExpansion {
            value: self.running(x, u, stage),
            state_grad,
            control_grad,
            state_hess,
            control_hess: Matrix::identity(u.len(), u.len()),
            cross,
        }
    }

    fn expand_terminal(&self, x: &Vector) -> TerminalExpansion {
        TerminalExpansion {
            value: self.terminal(x),
            state_grad: x.map(|v| 0.1 * (0.1 * v).exp()),
            state_hess: Matrix::from_diagonal(&x.map(|v| 0.01 * (0.1 * v).exp())),
        }
    }
}

pub fn coupling_cost(m: usize, p: usize, seed: u64) -> Arc<CouplingCost> {
    Arc::new(CouplingCost {
        w: rand_mat(&mut rng(seed), p, m, 1.0),
    })
}

/// Trajectory built from states and controls with zero defects.
pub fn traj(states: Vec<Vector>, controls: Vec<Vector>) -> Trajectory {
    Trajectory::from_parts(states, controls).unwrap()
}
