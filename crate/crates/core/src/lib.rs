//! Gauss-Newton shooting methods for unconstrained discrete-time nonlinear
//! optimal control.
//!
//! The crate implements one iteration scheme that covers a whole family of
//! solvers: open-loop single shooting, iLQR, Gauss-Newton multiple shooting
//! (GNMS), and the hybrid variants GNMS(M) and iLQR-GNMS(M) in which each
//! shooting interval spans several control stages. A real-time NMPC loop
//! with a preparation/feedback split is built on the same machinery.
//!
//! Every variant runs the same steps per iteration:
//!
//! 1. linearize the dynamics and quadratize the cost along the current
//!    trajectory ([`lq::assemble`]),
//! 2. solve the LQ subproblem with a Riccati backward sweep
//!    ([`riccati::backward_sweep`]),
//! 3. propagate the increments with a linear forward sweep
//!    ([`sweep::forward_sweep`]),
//! 4. integrate the shooting intervals, overwriting the interior decision
//!    variables and measuring the defects at interval ends
//!    ([`sweep::rollout_and_defects`]).
//!
//! Variants differ only in the number of shooting intervals and in whether
//! the interval rollouts apply the feedback gains ([`solver::Variant`]).

pub mod bench;
pub mod cost;
pub mod dynamics;
mod error;
pub mod lq;
pub mod nmpc;
pub mod oracle;
pub mod problem;
pub mod riccati;
pub mod solver;
pub mod sweep;

pub use error::{Error, Result};

/// Dynamically sized state / control vector.
pub type Vector = nalgebra::DVector<f64>;
/// Dynamically sized matrix.
pub type Matrix = nalgebra::DMatrix<f64>;

pub use cost::{CostModel, QuadraticTrackingCost};
pub use dynamics::{DynamicsModel, Integrator, Scheme, StageSensitivity};
pub use lq::LqSubproblem;
pub use problem::{IterationRecord, OcProblem, Trajectory};
pub use riccati::{FeedbackPolicy, Regularization, RiccatiSolution};
pub use solver::{InitStrategy, SolveResult, Solver, SolverSettings, Status, Variant};
pub use sweep::IntervalPartition;
