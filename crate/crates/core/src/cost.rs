//! Cost evaluation and second-order expansion along a trajectory.
//!
//! The cost model supplies exact second derivatives while the dynamics only
//! contribute first-order terms; that split is what makes every solver in
//! this crate a Gauss-Newton method.

use serde::{Deserialize, Serialize};

use crate::problem::Trajectory;
use crate::{Error, Matrix, Result, Vector};

/// Second-order expansion of the running cost at one stage:
/// `value + dx'q + du'r + 1/2 dx'Q dx + 1/2 du'R du + du'P dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageExpansion {
    pub value: f64,
    /// q, gradient w.r.t. x
    pub state_grad: Vector,
    /// r, gradient w.r.t. u
    pub control_grad: Vector,
    /// Q, m x m
    pub state_hess: Matrix,
    /// R, p x p
    pub control_hess: Matrix,
    /// P, p x m
    pub cross: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalExpansion {
    pub value: f64,
    pub state_grad: Vector,
    pub state_hess: Matrix,
}

pub trait CostModel: Send + Sync {
    /// Running cost `L_n(x, u)`.
    fn running(&self, x: &Vector, u: &Vector, stage: usize) -> f64;
    /// Terminal cost `Phi(x_N)`.
    fn terminal(&self, x: &Vector) -> f64;
    fn expand_running(&self, x: &Vector, u: &Vector, stage: usize) -> StageExpansion;
    fn expand_terminal(&self, x: &Vector) -> TerminalExpansion;
}

/// Expansion of the whole trajectory cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub stages: Vec<StageExpansion>,
    pub terminal: TerminalExpansion,
}

/// `J = Phi(x_N) + sum_n L_n(x_n, u_n)`.
pub fn evaluate(cost: &dyn CostModel, traj: &Trajectory) -> Result<f64> {
    let n = traj.horizon();
    let mut total = 0.0;
    for (k, (x, u)) in traj.states.iter().zip(&traj.controls).enumerate() {
        let l = cost.running(x, u, k);
        if !l.is_finite() {
            return Err(Error::CostEvaluation { stage: k });
        }
        total += l;
    }
    let phi = cost.terminal(&traj.states[n]);
    if !phi.is_finite() {
        return Err(Error::CostEvaluation { stage: n });
    }
    Ok(total + phi)
}

/// Expands one running stage, symmetrizing the Hessians and checking that
/// `R` is positive definite.
pub fn quadratize_stage(
    cost: &dyn CostModel,
    x: &Vector,
    u: &Vector,
    stage: usize,
) -> Result<StageExpansion> {
    let mut e = cost.expand_running(x, u, stage);
    symmetrize(&mut e.state_hess);
    symmetrize(&mut e.control_hess);
    if e.control_hess.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite { stage });
    }
    if !e.value.is_finite() {
        return Err(Error::CostEvaluation { stage });
    }
    Ok(e)
}

pub fn quadratize_terminal(cost: &dyn CostModel, x: &Vector, stage: usize) -> Result<TerminalExpansion> {
    let mut e = cost.expand_terminal(x);
    symmetrize(&mut e.state_hess);
    if !e.value.is_finite() {
        return Err(Error::CostEvaluation { stage });
    }
    Ok(e)
}

pub fn quadratize(cost: &dyn CostModel, traj: &Trajectory) -> Result<CostExpansion> {
    let stages = traj
        .states
        .iter()
        .zip(&traj.controls)
        .enumerate()
        .map(|(k, (x, u))| quadratize_stage(cost, x, u, k))
        .collect::<Result<Vec<_>>>()?;
    let n = traj.horizon();
    let terminal = quadratize_terminal(cost, &traj.states[n], n)?;
    Ok(CostExpansion { stages, terminal })
}

pub(crate) fn symmetrize(m: &mut Matrix) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `1/2 (x - x_des)'Q(x - x_des) + 1/2 (u - u_des)'R(u - u_des)` per stage
/// plus `1/2 (x_N - x_N_des)'Q_N(x_N - x_N_des)`.
///
/// References may be given per stage or as a single vector reused for every
/// stage. The expansion is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTrackingCost {
    pub q: Matrix,
    pub r: Matrix,
    pub q_final: Matrix,
    pub x_des: Vec<Vector>,
    pub u_des: Vec<Vector>,
    pub x_final_des: Vector,
}

impl QuadraticTrackingCost {
    /// Regulation cost towards constant references.
    pub fn new(q: Matrix, r: Matrix, q_final: Matrix, x_des: Vector, u_des: Vector) -> Result<Self> {
        let m = q.nrows();
        let p = r.nrows();
        if !q.is_square() || !q_final.is_square() || q_final.nrows() != m {
            return Err(Error::dim("state weight", m, q_final.nrows()));
        }
        if !r.is_square() {
            return Err(Error::dim("control weight", p, r.ncols()));
        }
        if x_des.len() != m {
            return Err(Error::dim("state reference", m, x_des.len()));
        }
        if u_des.len() != p {
            return Err(Error::dim("control reference", p, u_des.len()));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { stage: 0 });
        }
        Ok(Self {
            q,
            r,
            q_final,
            x_final_des: x_des.clone(),
            x_des: vec![x_des],
            u_des: vec![u_des],
        })
    }

    /// Replaces the terminal target.
    pub fn with_final_target(mut self, x_final_des: Vector) -> Self {
        self.x_final_des = x_final_des;
        self
    }

    fn x_ref(&self, stage: usize) -> &Vector {
        &self.x_des[stage.min(self.x_des.len() - 1)]
    }

    fn u_ref(&self, stage: usize) -> &Vector {
        &self.u_des[stage.min(self.u_des.len() - 1)]
    }
}

impl CostModel for QuadraticTrackingCost {
    fn running(&self, x: &Vector, u: &Vector, stage: usize) -> f64 {
        let dx = x - self.x_ref(stage);
        let du = u - self.u_ref(stage);
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du))
    }

    fn terminal(&self, x: &Vector) -> f64 {
        let dx = x - &self.x_final_des;
        0.5 * dx.dot(&(&self.q_final * &dx))
    }

    fn expand_running(&self, x: &Vector, u: &Vector, stage: usize) -> StageExpansion {
        let dx = x - self.x_ref(stage);
        let du = u - self.u_ref(stage);
        let qx = &self.q * &dx;
        let ru = &self.r * &du;
        StageExpansion {
            value: 0.5 * dx.dot(&qx) + 0.5 * du.dot(&ru),
            state_grad: qx,
            control_grad: ru,
            state_hess: self.q.clone(),
            control_hess: self.r.clone(),
            cross: Matrix::zeros(self.r.nrows(), self.q.nrows()),
        }
    }

    fn expand_terminal(&self, x: &Vector) -> TerminalExpansion {
        let dx = x - &self.x_final_des;
        let qx = &self.q_final * &dx;
        TerminalExpansion {
            value: 0.5 * dx.dot(&qx),
            state_grad: qx,
            state_hess: self.q_final.clone(),
        }
    }
}

/// Serializable description of a diagonal tracking cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalCostSpec {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_final: Vec<f64>,
    pub x_goal: Vec<f64>,
    #[serde(default)]
    pub u_goal: Option<Vec<f64>>,
}

impl DiagonalCostSpec {
    pub fn build(&self) -> Result<QuadraticTrackingCost> {
        let diag = |v: &[f64]| Matrix::from_diagonal(&Vector::from_column_slice(v));
        let u_goal = self
            .u_goal
            .clone()
            .unwrap_or_else(|| vec![0.0; self.r.len()]);
        QuadraticTrackingCost::new(
            diag(&self.q),
            diag(&self.r),
            diag(&self.q_final),
            Vector::from_vec(self.x_goal.clone()),
            Vector::from_vec(u_goal),
        )
    }
}
