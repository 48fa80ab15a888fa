use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve `m x = rhs` for symmetric positive-definite `m`, rejecting
/// systems whose condition number exceeds `max_condition`.
pub(crate) fn spd_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    max_condition: f64,
) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > max_condition {
        return Err(Error::SingularSystem(cond));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::SingularSystem(cond))?;
    Ok(chol.solve(rhs))
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>, max_condition: f64) -> Result<DMatrix<f64>> {
    let id = DMatrix::identity(m.nrows(), m.ncols());
    let mut inv = spd_solve(m, &id, max_condition)?;
    symmetrize(&mut inv);
    Ok(inv)
}

pub(crate) fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}
