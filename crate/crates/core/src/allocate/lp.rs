//! Bounded-variable dual simplex for covering programs
//!
//! ```text
//! min c'x   s.t.  A x >= b,  lo <= x <= hi,   with c >= 0 and A >= 0.
//! ```
//!
//! With nonnegative costs the all-slack basis at `x = lo` is dual feasible,
//! so the dual simplex starts without a phase one. The tableau is dense;
//! problems here have at most a few hundred rows and columns.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct CoverLp {
    pub cost: Vec<f64>,
    /// Sparse rows `(column, coefficient)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
}

const PIVOT_TOL: f64 = 1e-11;

impl CoverLp {
    /// Rows whose right-hand side exceeds `A hi`.
    pub fn capacity_violations(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .enumerate()
            .filter_map(|(r, (row, &b))| {
                let cap: f64 = row.iter().map(|&(j, a)| a * self.upper[j]).sum();
                (b > cap * (1.0 + 1e-12) + 1e-12).then_some((r, cap))
            })
            .collect()
    }

    pub fn solve(&self) -> Result<Vec<f64>> {
        let n = self.cost.len();
        if self.lower.len() != n || self.upper.len() != n || self.rows.len() != self.rhs.len() {
            return Err(Error::Solver("dimension mismatch".into()));
        }
        for j in 0..n {
            if !(self.lower[j] <= self.upper[j]) || self.cost[j] < 0.0 {
                return Err(Error::Solver(format!("bad bounds or cost for column {j}")));
            }
        }
        if let Some(&(r, cap)) = self.capacity_violations().first() {
            return Err(Error::Solver(format!(
                "row {r} needs {} but can reach only {cap}",
                self.rhs[r]
            )));
        }

        // Shift to y = x - lo in [0, u], keep only rows not already satisfied.
        let u: Vec<f64> = (0..n).map(|j| self.upper[j] - self.lower[j]).collect();
        let mut active: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for (row, &b) in self.rows.iter().zip(&self.rhs) {
            let shifted = b - row.iter().map(|&(j, a)| a * self.lower[j]).sum::<f64>();
            if shifted > 1e-12 * b.abs().max(1.0) {
                active.push((row.clone(), shifted));
            }
        }
        let m = active.len();
        let mut y = vec![0.0; n];
        if m > 0 {
            y = dual_simplex(&self.cost, &active, &u)?;
        }
        Ok((0..n)
            .map(|j| (self.lower[j] + y[j]).clamp(self.lower[j], self.upper[j]))
            .collect())
    }
}

/// Solves `min c'y, A y >= b, 0 <= y <= u` for `b > 0`.
fn dual_simplex(cost: &[f64], rows: &[(Vec<(usize, f64)>, f64)], u: &[f64]) -> Result<Vec<f64>> {
    let n = cost.len();
    let m = rows.len();
    let width = n + m;
    // Tableau of -A y + s = -b with the slack basis.
    let mut t = vec![0.0; m * width];
    let mut beta = vec![0.0; m];
    for (r, (row, b)) in rows.iter().enumerate() {
        for &(j, a) in row {
            t[r * width + j] -= a;
        }
        t[r * width + n + r] = 1.0;
        beta[r] = -b;
    }
    let mut d: Vec<f64> = cost.iter().copied().chain(std::iter::repeat(0.0).take(m)).collect();
    let mut state = vec![VarState::AtLower; width];
    let mut basis: Vec<usize> = (n..width).collect();
    for &j in &basis {
        state[j] = VarState::Basic;
    }
    let upper = |j: usize| if j < n { u[j] } else { f64::INFINITY };
    let scale = rows.iter().map(|r| r.1).fold(1.0_f64, f64::max);
    let primal_tol = 1e-9 * scale;

    let bland_after = 20 * width + 100;
    let max_iter = 200 * width + 1000;
    let mut xb = vec![0.0; m];
    for iter in 0..max_iter {
        for r in 0..m {
            let mut v = beta[r];
            for j in 0..n {
                if state[j] == VarState::AtUpper {
                    v -= t[r * width + j] * u[j];
                }
            }
            xb[r] = v;
        }
        let bland = iter > bland_after;
        let mut leave: Option<(usize, bool, f64)> = None; // row, below lower, infeasibility
        for r in 0..m {
            let j = basis[r];
            let (below, amount) = if xb[r] < -primal_tol {
                (true, -xb[r])
            } else if xb[r] > upper(j) + primal_tol {
                (false, xb[r] - upper(j))
            } else {
                continue;
            };
            let better = match leave {
                None => true,
                Some((r0, _, a0)) => {
                    if bland {
                        j < basis[r0]
                    } else {
                        amount > a0
                    }
                }
            };
            if better {
                leave = Some((r, below, amount));
            }
        }
        let Some((r, below, _)) = leave else {
            let mut y = vec![0.0; n];
            for j in 0..n {
                if state[j] == VarState::AtUpper {
                    y[j] = u[j];
                }
            }
            for (row, &j) in basis.iter().enumerate() {
                if j < n {
                    y[j] = xb[row];
                }
            }
            return Ok(y);
        };

        let mut enter: Option<(usize, f64, f64)> = None; // column, ratio, |pivot|
        for j in 0..width {
            let a = t[r * width + j];
            let eligible = match state[j] {
                VarState::Basic => false,
                VarState::AtLower => {
                    if below {
                        a < -PIVOT_TOL
                    } else {
                        a > PIVOT_TOL
                    }
                }
                VarState::AtUpper => {
                    if below {
                        a > PIVOT_TOL
                    } else {
                        a < -PIVOT_TOL
                    }
                }
            };
            if !eligible {
                continue;
            }
            let ratio = d[j].abs() / a.abs();
            let better = match enter {
                None => true,
                Some((_, r0, p0)) => {
                    if bland {
                        ratio < r0 - 1e-12
                    } else {
                        ratio < r0 - 1e-12 || (ratio <= r0 + 1e-12 && a.abs() > p0)
                    }
                }
            };
            if better {
                enter = Some((j, ratio, a.abs()));
            }
        }
        let Some((j, _, _)) = enter else {
            return Err(Error::Solver(format!("row {r} is infeasible")));
        };

        let piv = t[r * width + j];
        for k in 0..width {
            t[r * width + k] /= piv;
        }
        beta[r] /= piv;
        let (before, rest) = t.split_at_mut(r * width);
        let (pivot_row, after) = rest.split_at_mut(width);
        for (other, row) in before
            .chunks_exact_mut(width)
            .chain(after.chunks_exact_mut(width))
            .enumerate()
        {
            let i = if other < r { other } else { other + 1 };
            let f = row[j];
            if f != 0.0 {
                for k in 0..width {
                    row[k] -= f * pivot_row[k];
                }
                beta[i] -= f * beta[r];
            }
        }
        let f = d[j];
        if f != 0.0 {
            for k in 0..width {
                d[k] -= f * pivot_row[k];
            }
        }
        let leaving = basis[r];
        state[leaving] = if below { VarState::AtLower } else { VarState::AtUpper };
        state[j] = VarState::Basic;
        basis[r] = j;
    }
    Err(Error::Solver("iteration limit reached".into()))
}
