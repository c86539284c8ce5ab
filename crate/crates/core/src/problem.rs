//! Problem and trajectory containers shared by every solver component.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::dynamics::{DynamicsModel, Integrator};
use crate::{Error, Result, Vector};

/// Discrete-time optimal control problem over `horizon` control stages.
#[derive(Clone)]
pub struct OcProblem {
    pub dynamics: Arc<dyn DynamicsModel>,
    pub cost: Arc<dyn CostModel>,
    pub integrator: Integrator,
    pub horizon: usize,
    pub x_init: Vector,
}

impl std::fmt::Debug for OcProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcProblem")
            .field("state_dim", &self.state_dim())
            .field("control_dim", &self.control_dim())
            .field("integrator", &self.integrator)
            .field("horizon", &self.horizon)
            .field("x_init", &self.x_init.as_slice())
            .finish()
    }
}

impl OcProblem {
    pub fn new(
        dynamics: Arc<dyn DynamicsModel>,
        cost: Arc<dyn CostModel>,
        integrator: Integrator,
        horizon: usize,
        x_init: Vector,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if dynamics.state_dim() == 0 || dynamics.control_dim() == 0 {
            return Err(Error::Config(
                "state and control dimensions must be positive".into(),
            ));
        }
        if x_init.len() != dynamics.state_dim() {
            return Err(Error::dim("x_init", dynamics.state_dim(), x_init.len()));
        }
        Ok(Self {
            dynamics,
            cost,
            integrator,
            horizon,
            x_init,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn dt(&self) -> f64 {
        self.integrator.dt
    }

    /// Same problem with a different initial state.
    pub fn with_x_init(&self, x_init: Vector) -> Result<Self> {
        Self::new(
            self.dynamics.clone(),
            self.cost.clone(),
            self.integrator,
            self.horizon,
            x_init,
        )
    }
}

/// States `x_0..=x_N`, controls `u_0..u_{N-1}` and defects `d_0..d_{N-1}`.
///
/// Defects are stored next to the decision variables so that every solver
/// component reads one consistent snapshot per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub defects: Vec<Vector>,
}

impl Trajectory {
    pub fn zeros(state_dim: usize, control_dim: usize, horizon: usize) -> Self {
        Self {
            states: vec![Vector::zeros(state_dim); horizon + 1],
            controls: vec![Vector::zeros(control_dim); horizon],
            defects: vec![Vector::zeros(state_dim); horizon],
        }
    }

    /// Builds a trajectory with zero defects.
    pub fn from_parts(states: Vec<Vector>, controls: Vec<Vector>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::dim("states", controls.len() + 1, states.len()));
        }
        let m = states.first().map_or(0, |x| x.len());
        let defects = vec![Vector::zeros(m); controls.len()];
        Ok(Self {
            states,
            controls,
            defects,
        })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Checks every vector against the problem dimensions.
    pub fn check_dims(&self, m: usize, p: usize, horizon: usize) -> Result<()> {
        if self.controls.len() != horizon {
            return Err(Error::dim("control sequence", horizon, self.controls.len()));
        }
        if self.states.len() != horizon + 1 {
            return Err(Error::dim("state sequence", horizon + 1, self.states.len()));
        }
        if self.defects.len() != horizon {
            return Err(Error::dim("defect sequence", horizon, self.defects.len()));
        }
        for x in self.states.iter().chain(&self.defects) {
            if x.len() != m {
                return Err(Error::dim("state vector", m, x.len()));
            }
        }
        for u in &self.controls {
            if u.len() != p {
                return Err(Error::dim("control vector", p, u.len()));
            }
        }
        Ok(())
    }

    pub fn total_defect(&self) -> f64 {
        total_defect(&self.defects)
    }
}

/// One line of the per-iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub defect_l1: f64,
    pub update_norm: f64,
    pub alpha: f64,
    pub wall_ms: f64,
}

/// Elementwise absolute sum over all defect vectors.
pub fn total_defect(defects: &[Vector]) -> f64 {
    defects.iter().map(|d| d.lp_norm(1)).sum()
}

/// Euclidean norm of the stacked difference `u_new - u_old`.
pub fn control_update_norm(u_new: &[Vector], u_old: &[Vector]) -> Result<f64> {
    if u_new.len() != u_old.len() {
        return Err(Error::dim("control sequence", u_old.len(), u_new.len()));
    }
    let mut acc = 0.0;
    for (a, b) in u_new.iter().zip(u_old) {
        if a.len() != b.len() {
            return Err(Error::dim("control vector", b.len(), a.len()));
        }
        acc += (a - b).norm_squared();
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Vec<Vector> {
        v.iter().map(|&x| Vector::from_element(1, x)).collect()
    }

    #[test]
    fn total_defect_of_zero_defects() {
        let traj = Trajectory::zeros(3, 1, 10);
        assert_eq!(traj.total_defect(), 0.0);
    }

    #[test]
    fn total_defect_sums_absolute_values() {
        let d = scalars(&[0.0375, -0.01]);
        assert!((total_defect(&d) - 0.0475).abs() < 1e-15);
    }

    #[test]
    fn update_norm_identity_and_pythagoras() {
        let a = scalars(&[1.0, 2.0]);
        assert_eq!(control_update_norm(&a, &a).unwrap(), 0.0);
        let b = scalars(&[4.0, 6.0]);
        assert_eq!(control_update_norm(&b, &a).unwrap(), 5.0);
    }

    #[test]
    fn update_norm_length_mismatch() {
        let a = scalars(&[1.0, 2.0]);
        let b = scalars(&[1.0]);
        assert!(matches!(
            control_update_norm(&a, &b),
            Err(Error::Dimension { .. })
        ));
    }

    fn seq(len: usize, width: usize) -> impl Strategy<Value = Vec<Vector>> {
        prop::collection::vec(
            prop::collection::vec(-10.0f64..10.0, width).prop_map(Vector::from_vec),
            len,
        )
    }

    proptest! {
        #[test]
        fn update_norm_matches_flattened_norm(a in seq(6, 3), b in seq(6, 3)) {
            let flat: f64 = a.iter().zip(&b)
                .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)))
                .sum::<f64>()
                .sqrt();
            let got = control_update_norm(&a, &b).unwrap();
            prop_assert!((got - flat).abs() <= 1e-12 * (1.0 + flat));
        }

        #[test]
        fn update_norm_triangle_inequality(a in seq(4, 2), b in seq(4, 2), c in seq(4, 2)) {
            let ab = control_update_norm(&a, &b).unwrap();
            let bc = control_update_norm(&b, &c).unwrap();
            let ac = control_update_norm(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn total_defect_nonnegative_zero_iff_all_zero(d in seq(5, 2)) {
            let t = total_defect(&d);
            prop_assert!(t >= 0.0);
            prop_assert_eq!(t == 0.0, d.iter().all(|v| v.iter().all(|&x| x == 0.0)));
        }
    }
}
