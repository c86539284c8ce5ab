//! Dense KKT solver for LQ subproblems.
//!
//! Solves the equality-constrained QP in one shot, without the Riccati
//! recursion, so that the two methods can be cross-checked. The cost is
//! cubic in `N (2m + p)`; intended for test-sized instances.
//!
//! Decision vector `z = (dx_1 .. dx_N, du_0 .. du_{N-1})` with `dx_0 = 0`
//! eliminated, followed by one multiplier block per dynamics row:
//!
//! ```text
//! [ H  C' ] [ z ]   [ -g ]
//! [ C  0  ] [ y ] = [  d ]     row n of C z: dx_{n+1} - A_n dx_n - B_n du_n
//! ```

use crate::lq::LqSubproblem;
use crate::{Error, Matrix, Result, Vector};

/// Assembled KKT matrix and right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSystem {
    pub matrix: Matrix,
    pub rhs: Vector,
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl KktSystem {
    fn x_at(&self, n: usize) -> usize {
        debug_assert!(n >= 1);
        (n - 1) * self.state_dim
    }

    fn u_at(&self, n: usize) -> usize {
        self.horizon * self.state_dim + n * self.control_dim
    }

    fn y_at(&self, n: usize) -> usize {
        self.horizon * (self.state_dim + self.control_dim) + n * self.state_dim
    }

    pub fn primal_len(&self) -> usize {
        self.horizon * (self.state_dim + self.control_dim)
    }

    pub fn build(lq: &LqSubproblem) -> Result<Self> {
        let (n, m, p) = (lq.horizon(), lq.state_dim(), lq.control_dim());
        if n == 0 {
            return Err(Error::Config("LQ subproblem has no stages".into()));
        }
        let size = n * (2 * m + p);
        let mut sys = KktSystem {
            matrix: Matrix::zeros(size, size),
            rhs: Vector::zeros(size),
            horizon: n,
            state_dim: m,
            control_dim: p,
        };
        for (k, st) in lq.stages.iter().enumerate() {
            if st.a.shape() != (m, m) {
                return Err(Error::dim("A matrix rows", m, st.a.nrows()));
            }
            if st.b.shape() != (m, p) {
                return Err(Error::dim("B matrix columns", p, st.b.ncols()));
            }
            let (iu, iy) = (sys.u_at(k), sys.y_at(k));
            sys.matrix.view_mut((iu, iu), (p, p)).copy_from(&st.control_hess);
            sys.rhs.rows_mut(iu, p).copy_from(&(-&st.control_grad));
            if k >= 1 {
                let ix = sys.x_at(k);
                sys.matrix.view_mut((ix, ix), (m, m)).copy_from(&st.state_hess);
                sys.matrix.view_mut((iu, ix), (p, m)).copy_from(&st.cross);
                sys.matrix
                    .view_mut((ix, iu), (m, p))
                    .copy_from(&st.cross.transpose());
                sys.rhs.rows_mut(ix, m).copy_from(&(-&st.state_grad));
                sys.set_constraint_block(iy, ix, &(-&st.a));
            }
            let ix_next = sys.x_at(k + 1);
            sys.set_constraint_block(iy, ix_next, &Matrix::identity(m, m));
            sys.set_constraint_block(iy, iu, &(-&st.b));
            sys.rhs.rows_mut(iy, m).copy_from(&st.defect);
        }
        let ix = sys.x_at(n);
        {
            let mut blk = sys.matrix.view_mut((ix, ix), (m, m));
            blk += &lq.terminal.state_hess;
        }
        {
            let mut r = sys.rhs.rows_mut(ix, m);
            r -= &lq.terminal.state_grad;
        }
        Ok(sys)
    }

    /// Writes `block` at constraint rows `row` / primal columns `col` and
    /// its transpose in the mirrored position.
    fn set_constraint_block(&mut self, row: usize, col: usize, block: &Matrix) {
        let (r, c) = block.shape();
        self.matrix.view_mut((row, col), (r, c)).copy_from(block);
        self.matrix
            .view_mut((col, row), (c, r))
            .copy_from(&block.transpose());
    }
}

/// Increments and multipliers of the LQ optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    /// `dx_0 .. dx_N`, with `dx_0 = 0`
    pub dx: Vec<Vector>,
    pub du: Vec<Vector>,
    /// multipliers of the dynamics rows
    pub multipliers: Vec<Vector>,
    /// optimal objective minus the constant terms
    pub objective_change: f64,
    /// `|K w - b| / (|K| |w| + |b|)`
    pub relative_residual: f64,
}

/// Solves the LQ subproblem through its dense KKT system.
pub fn solve_kkt(lq: &LqSubproblem) -> Result<KktSolution> {
    let sys = KktSystem::build(lq)?;
    let lu = sys.matrix.clone().full_piv_lu();
    let w = lu.solve(&sys.rhs).ok_or(Error::DegenerateKkt)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateKkt);
    }
    let scale = sys.matrix.norm() * w.norm() + sys.rhs.norm();
    let residual = (&sys.matrix * &w - &sys.rhs).norm();
    let relative_residual = if scale > 0.0 { residual / scale } else { 0.0 };
    // full pivoting with a tiny pivot can still return garbage
    if relative_residual > 1e-6 {
        return Err(Error::DegenerateKkt);
    }

    let (n, m, p) = (sys.horizon, sys.state_dim, sys.control_dim);
    let mut dx = Vec::with_capacity(n + 1);
    dx.push(Vector::zeros(m));
    dx.extend((1..=n).map(|k| w.rows(sys.x_at(k), m).into_owned()));
    let du: Vec<Vector> = (0..n).map(|k| w.rows(sys.u_at(k), p).into_owned()).collect();
    let multipliers = (0..n).map(|k| w.rows(sys.y_at(k), m).into_owned()).collect();
    let objective_change = lq.objective(&dx, &du) - lq.constant_sum();
    Ok(KktSolution {
        dx,
        du,
        multipliers,
        objective_change,
        relative_residual,
    })
}

/// Largest violation of `dx_{n+1} = A dx_n + B du_n + d_n` (and of `dx_0 = 0`).
pub fn feasibility_residual(lq: &LqSubproblem, dx: &[Vector], du: &[Vector]) -> f64 {
    let mut worst = dx[0].amax();
    for (k, st) in lq.stages.iter().enumerate() {
        let r = &dx[k + 1] - &st.a * &dx[k] - &st.b * &du[k] - &st.defect;
        worst = worst.max(r.amax());
    }
    worst
}

/// Relative norm of the Lagrangian gradient at `(dx, du, multipliers)`.
pub fn stationarity_residual(
    lq: &LqSubproblem,
    dx: &[Vector],
    du: &[Vector],
    multipliers: &[Vector],
) -> Result<f64> {
    let sys = KktSystem::build(lq)?;
    let (n, m, p) = (sys.horizon, sys.state_dim, sys.control_dim);
    let mut z = Vector::zeros(sys.primal_len() + n * m);
    for k in 1..=n {
        z.rows_mut(sys.x_at(k), m).copy_from(&dx[k]);
    }
    for k in 0..n {
        z.rows_mut(sys.u_at(k), p).copy_from(&du[k]);
        z.rows_mut(sys.y_at(k), m).copy_from(&multipliers[k]);
    }
    let len = sys.primal_len();
    let rows = sys.matrix.rows(0, len);
    let r = rows * &z - sys.rhs.rows(0, len);
    let scale = rows.norm() * z.norm() + sys.rhs.rows(0, len).norm();
    Ok(if scale > 0.0 { r.norm() / scale } else { 0.0 })
}
