//! Stage-wise LQ subproblem around a trajectory snapshot.
//!
//! For increments `dx_n`, `du_n` with `dx_0 = 0`:
//!
//! ```text
//! min  sum_n [ c_n + dx'q + du'r + 1/2 dx'Q dx + 1/2 du'R du + du'P dx ]
//!      + c_N + dx_N'q_N + 1/2 dx_N'Q_N dx_N
//! s.t. dx_{n+1} = A_n dx_n + B_n du_n + d_n
//! ```

use serde::{Deserialize, Serialize};

use crate::cost::{CostExpansion, StageExpansion, TerminalExpansion};
use crate::dynamics::StageSensitivity;
use crate::problem::{OcProblem, Trajectory};
use crate::{cost, Error, Matrix, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqStage {
    #[serde(with = "serde_mat")]
    pub a: Matrix,
    #[serde(with = "serde_mat")]
    pub b: Matrix,
    #[serde(with = "serde_vec")]
    pub defect: Vector,
    /// scalar cost term
    pub constant: f64,
    #[serde(with = "serde_vec")]
    pub state_grad: Vector,
    #[serde(with = "serde_vec")]
    pub control_grad: Vector,
    #[serde(with = "serde_mat")]
    pub state_hess: Matrix,
    #[serde(with = "serde_mat")]
    pub control_hess: Matrix,
    /// P, p x m
    #[serde(with = "serde_mat")]
    pub cross: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqTerminal {
    pub constant: f64,
    #[serde(with = "serde_vec")]
    pub state_grad: Vector,
    #[serde(with = "serde_mat")]
    pub state_hess: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqSubproblem {
    pub stages: Vec<LqStage>,
    pub terminal: LqTerminal,
}

impl LqSubproblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.terminal.state_grad.len()
    }

    pub fn control_dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.b.ncols())
    }

    /// Combines per-stage linearization, defects and cost expansion.
    pub fn from_parts(
        sens: &[StageSensitivity],
        defects: &[Vector],
        expansion: CostExpansion,
    ) -> Result<Self> {
        let n = expansion.stages.len();
        if sens.len() != n {
            return Err(Error::dim("sensitivity sequence", n, sens.len()));
        }
        if defects.len() != n {
            return Err(Error::dim("defect sequence", n, defects.len()));
        }
        let stages = expansion
            .stages
            .into_iter()
            .zip(sens)
            .zip(defects)
            .map(|((e, s), d)| stage_from(s, d, e))
            .collect();
        Ok(Self {
            stages,
            terminal: terminal_from(expansion.terminal),
        })
    }

    /// LQ objective at the given increments, constants included.
    pub fn objective(&self, dx: &[Vector], du: &[Vector]) -> f64 {
        let mut total = 0.0;
        for (n, st) in self.stages.iter().enumerate() {
            let (x, u) = (&dx[n], &du[n]);
            total += st.constant
                + x.dot(&st.state_grad)
                + u.dot(&st.control_grad)
                + 0.5 * x.dot(&(&st.state_hess * x))
                + 0.5 * u.dot(&(&st.control_hess * u))
                + u.dot(&(&st.cross * x));
        }
        let x = &dx[self.horizon()];
        total
            + self.terminal.constant
            + x.dot(&self.terminal.state_grad)
            + 0.5 * x.dot(&(&self.terminal.state_hess * x))
    }

    /// Sum of all scalar cost terms.
    pub fn constant_sum(&self) -> f64 {
        self.stages.iter().map(|s| s.constant).sum::<f64>() + self.terminal.constant
    }
}

pub(crate) fn stage_from(s: &StageSensitivity, d: &Vector, e: StageExpansion) -> LqStage {
    LqStage {
        a: s.a.clone(),
        b: s.b.clone(),
        defect: d.clone(),
        constant: e.value,
        state_grad: e.state_grad,
        control_grad: e.control_grad,
        state_hess: e.state_hess,
        control_hess: e.control_hess,
        cross: e.cross,
    }
}

pub(crate) fn terminal_from(e: TerminalExpansion) -> LqTerminal {
    LqTerminal {
        constant: e.value,
        state_grad: e.state_grad,
        state_hess: e.state_hess,
    }
}

/// Builds the LQ subproblem at `traj`.
///
/// `sens[n]` must be the sensitivities evaluated at `(x_n, u_n)` of the same
/// rollout that produced the defects stored in `traj`.
pub fn assemble(
    problem: &OcProblem,
    traj: &Trajectory,
    sens: &[StageSensitivity],
) -> Result<LqSubproblem> {
    let (m, p) = (problem.state_dim(), problem.control_dim());
    traj.check_dims(m, p, problem.horizon)?;
    if sens.len() != problem.horizon {
        return Err(Error::dim("sensitivity sequence", problem.horizon, sens.len()));
    }
    for s in sens {
        if s.a.shape() != (m, m) {
            return Err(Error::dim("A matrix rows", m, s.a.nrows()));
        }
        if s.b.shape() != (m, p) {
            return Err(Error::dim("B matrix columns", p, s.b.ncols()));
        }
    }
    let expansion = cost::quadratize(problem.cost.as_ref(), traj)?;
    LqSubproblem::from_parts(sens, &traj.defects, expansion)
}

/// Row-major nested arrays.
pub(crate) mod serde_mat {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_row_iterator(
            nrows,
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}

pub(crate) mod serde_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let stage = LqStage {
            a: Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]),
            b: Matrix::from_row_slice(2, 1, &[0.0, 0.1]),
            defect: Vector::from_vec(vec![0.5, -1e-17]),
            constant: 3.25,
            state_grad: Vector::from_vec(vec![1.0, 2.0]),
            control_grad: Vector::from_vec(vec![-0.3]),
            state_hess: Matrix::identity(2, 2),
            control_hess: Matrix::from_element(1, 1, 0.01),
            cross: Matrix::from_row_slice(1, 2, &[0.25, -0.5]),
        };
        let lq = LqSubproblem {
            stages: vec![stage.clone(), stage],
            terminal: LqTerminal {
                constant: 1.0,
                state_grad: Vector::from_vec(vec![0.0, 1.0]),
                state_hess: Matrix::identity(2, 2) * 10.0,
            },
        };
        let json = serde_json::to_string(&lq).unwrap();
        assert!(json.contains("\"cross\":[[0.25,-0.5]]"));
        let back: LqSubproblem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lq);
    }

    #[test]
    fn ragged_rows_rejected() {
        let json = r#"{"constant":0.0,"state_grad":[1.0],"state_hess":[[1.0],[1.0,2.0]]}"#;
        assert!(serde_json::from_str::<LqTerminal>(json).is_err());
    }
}
