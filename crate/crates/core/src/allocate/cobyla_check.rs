//! Derivative-free cross-check: the allocation problem solved in its
//! original nonlinear form, with no use of the linear reduction.

use cobyla::{minimize, RhoBeg, StopTols};
use nalgebra::DMatrix;

use super::{AllocationResult, DesignProblem, SolverKind, Status};
use crate::error::{Error, Result};

/// `ln g1_vd(x)` for every targeted pair, from the nonlinear formulas.
struct Constraints<'a> {
    problem: &'a DesignProblem,
    blocks: Vec<Option<Vec<DMatrix<f64>>>>,
    pairs: Vec<(usize, usize, f64)>,
    big_n: Vec<f64>,
}

impl Constraints<'_> {
    fn log_slack(&self, x: &[f64]) -> Vec<f64> {
        let n = self.problem.domain_sample_sizes(x);
        let mut t = Vec::with_capacity(self.blocks.len());
        for (v, b) in self.blocks.iter().enumerate() {
            match self.problem.unit_shrinkage(v, &n, b.as_deref()) {
                Ok((diag, _)) => t.push(diag),
                Err(_) => return vec![-1.0; self.pairs.len()],
            }
        }
        self.pairs
            .iter()
            .map(|&(v, d, g1_star)| {
                let g1 = self.problem.lead(self.big_n[d], n[d])
                    * self.problem.variables[v].vc.sigma2
                    * t[v][d];
                g1_star.ln() - g1.max(1e-300).ln()
            })
            .collect()
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        self.log_slack(x).iter().map(|s| (-s).exp_m1()).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Minimizes `sum_c C_c x_c` subject to `g1_vd(x) <= g1*_vd` with COBYLA on
/// `z = x / upper`, then scales the result up until it is feasible.
pub fn solve_cobyla_check(problem: &DesignProblem) -> Result<AllocationResult> {
    problem.validate()?;
    let cons = Constraints {
        problem,
        blocks: (0..problem.variables.len())
            .map(|v| problem.model_blocks(v))
            .collect::<Result<_>>()?,
        pairs: problem.targeted().map(|(v, d, t)| (v, d, t.g1_star)).collect(),
        big_n: problem.domain_sizes(),
    };
    let upper = problem.upper_bounds();
    let lower = problem.lower_bounds();
    let to_x = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .zip(&upper)
            .zip(&lower)
            .map(|((z, u), l)| (z * u).clamp(*l, *u))
            .collect()
    };
    let full = upper.clone();
    if cons.max_violation(&full) > problem.options.feasibility_tolerance {
        let viol = super::direct::violations(problem, &super::direct::requirements(problem));
        return problem.finish(SolverKind::CobylaCheck, full, Status::Infeasible, viol, vec![], vec![]);
    }

    let scale: f64 = problem.cells.iter().zip(&upper).map(|(c, u)| c.cost * u).sum();
    let objective = |z: &[f64], _: &mut ()| -> f64 {
        z.iter()
            .zip(&problem.cells)
            .zip(&upper)
            .map(|((z, c), u)| c.cost * u * z)
            .sum::<f64>()
            / scale
    };
    let constraints: Vec<_> = (0..cons.pairs.len())
        .map(|k| {
            let cons = &cons;
            let to_x = &to_x;
            move |z: &[f64], _: &mut ()| cons.log_slack(&to_x(z))[k]
        })
        .collect();
    let bounds: Vec<(f64, f64)> = lower.iter().zip(&upper).map(|(l, u)| (l / u, 1.0)).collect();
    let z0 = vec![1.0; upper.len()];
    let tols = StopTols {
        ftol_rel: 1e-10,
        xtol_rel: 1e-10,
        ..StopTols::default()
    };
    let z = match minimize(
        objective,
        &z0,
        &bounds,
        &constraints,
        (),
        problem.options.cobyla_max_eval,
        RhoBeg::All(0.25),
        Some(tols),
    ) {
        Ok((_, z, _)) => z,
        // The iterate is still usable: repair makes it feasible.
        Err((_, z, _)) if z.iter().all(|v| v.is_finite()) => z,
        Err((status, _, _)) => return Err(Error::Solver(format!("cobyla: {status:?}"))),
    };

    // Smallest uniform scale-up s >= 1 restoring feasibility.
    let x0 = to_x(&z);
    let scaled = |s: f64| -> Vec<f64> { x0.iter().zip(&upper).map(|(x, u)| (x * s).min(*u)).collect() };
    let tol = problem.options.feasibility_tolerance;
    let x = if cons.max_violation(&x0) <= tol {
        x0.clone()
    } else {
        let mut hi = 2.0;
        while cons.max_violation(&scaled(hi)) > tol {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::Solver("cobyla repair failed".into()));
            }
        }
        let mut lo = 1.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cons.max_violation(&scaled(mid)) > tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        scaled(hi)
    };
    problem.finish(SolverKind::CobylaCheck, x, Status::Optimal, vec![], vec![], vec![])
}

#[cfg(test)]
mod tests {
    use super::super::direct::solve_direct;
    use super::super::tests::nested;
    use super::*;

    #[test]
    fn close_to_the_linear_reduction() {
        let p = nested(&[800.0, 1500.0, 2200.0, 9900.0], &[0, 0, 1, 1], 0.07, 0.5);
        let d = solve_direct(&p).unwrap();
        let c = solve_cobyla_check(&p).unwrap();
        assert!(c.max_violation <= 1e-6);
        assert!(c.cost >= d.cost * (1.0 - 1e-6));
        assert!(c.cost <= d.cost * 1.01, "{} vs {}", c.cost, d.cost);
    }
}
