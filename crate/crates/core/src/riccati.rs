//! Riccati backward sweep for LQ subproblems with defects.
//!
//! The value function `V_n(dx) = v_n + dx's_n + 1/2 dx'S_n dx` is propagated
//! backwards from `S_N = Q_N`, `s_N = q_N`, `v_N = c_N`. Per stage
//!
//! ```text
//! h = r + B'(s' + S'd)     G = P + B'S'A     H = R + B'S'B
//! l = -H^-1 h              L = -H^-1 G
//! S = Q + A'S'A - L'HL
//! s = q + A'(s' + S'd) + G'l + L'(h + Hl)
//! v = c + v' + d's' + 1/2 d'S'd + l'(h + 1/2 Hl)
//! ```
//!
//! where primes denote stage `n + 1`. The defects only enter through `h`,
//! `s` and `v`; with zero defects this is the plain iLQR recursion.

use nalgebra::Cholesky;

use crate::lq::LqSubproblem;
use crate::{cost, Error, Matrix, Result, Vector};

/// Levenberg-style shift `H + mu I` applied when `H` fails to factorize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub mu_init: f64,
    pub factor: f64,
    pub mu_max: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            mu_init: 1e-6,
            factor: 10.0,
            mu_max: 1e6,
        }
    }
}

/// Affine feedback law `du = l + L dx` per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub feedforward: Vec<Vector>,
    pub gains: Vec<Matrix>,
}

impl FeedbackPolicy {
    pub fn zeros(state_dim: usize, control_dim: usize, horizon: usize) -> Self {
        Self {
            feedforward: vec![Vector::zeros(control_dim); horizon],
            gains: vec![Matrix::zeros(control_dim, state_dim); horizon],
        }
    }

    /// Keeps the gains and zeroes the feedforward terms.
    pub fn feedback_only(&self) -> Self {
        Self {
            feedforward: self
                .feedforward
                .iter()
                .map(|l| Vector::zeros(l.len()))
                .collect(),
            gains: self.gains.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub policy: FeedbackPolicy,
    /// H_n (after regularization, if any)
    pub hessians: Vec<Matrix>,
    /// G_n
    pub cross: Vec<Matrix>,
    /// h_n
    pub gradients: Vec<Vector>,
    /// mu_n applied at each stage (0 when none was needed)
    pub shifts: Vec<f64>,
    /// S_n for n = 0..=N
    pub value_hess: Vec<Matrix>,
    /// s_n for n = 0..=N
    pub value_grad: Vec<Vector>,
    /// scalar v_n for n = 0..=N
    pub value_const: Vec<f64>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.hessians.len()
    }
}

pub fn backward_sweep(lq: &LqSubproblem, reg: &Regularization) -> Result<RiccatiSolution> {
    let n = lq.horizon();
    let mut feedforward = vec![Vector::zeros(0); n];
    let mut gains = vec![Matrix::zeros(0, 0); n];
    let mut hessians = vec![Matrix::zeros(0, 0); n];
    let mut cross = vec![Matrix::zeros(0, 0); n];
    let mut gradients = vec![Vector::zeros(0); n];
    let mut shifts = vec![0.0; n];
    let mut value_hess = vec![Matrix::zeros(0, 0); n + 1];
    let mut value_grad = vec![Vector::zeros(0); n + 1];
    let mut value_const = vec![0.0; n + 1];

    value_hess[n] = lq.terminal.state_hess.clone();
    value_grad[n] = lq.terminal.state_grad.clone();
    value_const[n] = lq.terminal.constant;

    for k in (0..n).rev() {
        let st = &lq.stages[k];
        let s_next = &value_hess[k + 1];
        let bt_s = st.b.transpose() * s_next;
        // s' + S'd
        let s_shift = &value_grad[k + 1] + s_next * &st.defect;

        let h = &st.control_grad + st.b.transpose() * &s_shift;
        let g = &st.cross + &bt_s * &st.a;
        let mut big_h = &st.control_hess + &bt_s * &st.b;
        cost::symmetrize(&mut big_h);

        let (chol, mu) = factorize(&big_h, reg, k)?;
        if mu > 0.0 {
            big_h += Matrix::identity(big_h.nrows(), big_h.ncols()) * mu;
        }
        let l = -chol.solve(&h);
        let gain = -chol.solve(&g);

        let hl = &big_h * &l;
        let mut s_mat = &st.state_hess + st.a.transpose() * s_next * &st.a
            - gain.transpose() * &big_h * &gain;
        cost::symmetrize(&mut s_mat);
        let s_vec = &st.state_grad
            + st.a.transpose() * &s_shift
            + g.transpose() * &l
            + gain.transpose() * (&h + &hl);
        let v = st.constant
            + value_const[k + 1]
            + st.defect.dot(&value_grad[k + 1])
            + 0.5 * st.defect.dot(&(s_next * &st.defect))
            + l.dot(&(&h + &hl * 0.5));

        value_hess[k] = s_mat;
        value_grad[k] = s_vec;
        value_const[k] = v;
        feedforward[k] = l;
        gains[k] = gain;
        hessians[k] = big_h;
        cross[k] = g;
        gradients[k] = h;
        shifts[k] = mu;
    }

    Ok(RiccatiSolution {
        policy: FeedbackPolicy { feedforward, gains },
        hessians,
        cross,
        gradients,
        shifts,
        value_hess,
        value_grad,
        value_const,
    })
}

fn factorize(h: &Matrix, reg: &Regularization, stage: usize) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = h.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let eye = Matrix::identity(h.nrows(), h.ncols());
    let mut mu = reg.mu_init;
    while mu <= reg.mu_max {
        if let Some(c) = (h + &eye * mu).cholesky() {
            return Ok((c, mu));
        }
        mu *= reg.factor;
    }
    Err(Error::NonConvex { stage, mu })
}

/// Predicted change of the total cost under the full step with `dx_0 = 0`.
pub fn predicted_cost_change(sol: &RiccatiSolution, lq: &LqSubproblem) -> f64 {
    sol.value_const[0] - lq.constant_sum()
}
