//! Fixed-point allocation for designs whose shrinkage factors couple the
//! domains. With `gamma` frozen at the previous iterate each g1 target is
//! the linear bound `n_d >= lead * sigma2 * gamma_d / g1*`, so every step is
//! a covering program and the iteration is `n <- g(n)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::direct::{capacity, cover};
use super::{
    AllocationResult, ContractionReport, DesignProblem, Initialization, SolverKind, Status, TraceRow,
};
use crate::error::{Result, Violation};

/// Snapshot of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointState {
    pub iteration: usize,
    /// Cell sample sizes `x^t`.
    pub x: Vec<f64>,
    /// Domain sizes the shrinkage factors were frozen at, `n^{t-1}`.
    pub n_prev: Vec<f64>,
    /// `gamma_vd(n^{t-1})`, one row per variable.
    pub gamma: Vec<Vec<f64>>,
    pub stop_statistic: Option<f64>,
}

type Blocks = Vec<Option<Vec<DMatrix<f64>>>>;

fn blocks(problem: &DesignProblem) -> Result<Blocks> {
    (0..problem.variables.len()).map(|v| problem.model_blocks(v)).collect()
}

/// The update map `g_vd(n) = lead * sigma2 * t_dd(n) n_d / g1*`, with the
/// leading factor frozen at `n`.
fn update_map(problem: &DesignProblem, blocks: &Blocks, n: &[f64]) -> Result<Vec<Vec<Option<f64>>>> {
    let big_n = problem.domain_sizes();
    let mut out = Vec::with_capacity(problem.variables.len());
    for (v, var) in problem.variables.iter().enumerate() {
        let (t, _) = problem.unit_shrinkage(v, n, blocks[v].as_deref())?;
        out.push(
            var.thresholds
                .iter()
                .enumerate()
                .map(|(d, th)| {
                    th.map(|th| problem.lead(big_n[d], n[d]) * var.vc.sigma2 * t[d] * n[d] / th.g1_star)
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Compares the loose bound `sigma2_u / V*` with the exact derivative of
/// the update map in `n_d`, at the sizes the iterate was built from.
///
/// With `T* = (diag(n) + Omega^-1)^-1`, `d(n_d t_dd)/dn_d = t_dd - n_d t_dd^2`,
/// which in the random-mean case is `(sigma2_u / sigma2)(sigma2/n)^2 /
/// (sigma2/n + sigma2_u)^2`.
pub fn contraction_check(state: &FixedPointState, problem: &DesignProblem) -> Result<Vec<ContractionReport>> {
    let blocks = blocks(problem)?;
    contraction_at(problem, &blocks, &state.n_prev)
}

fn contraction_at(problem: &DesignProblem, blocks: &Blocks, n: &[f64]) -> Result<Vec<ContractionReport>> {
    reports(problem, blocks, n, true)
}

fn reports(
    problem: &DesignProblem,
    blocks: &Blocks,
    n: &[f64],
    difference: bool,
) -> Result<Vec<ContractionReport>> {
    let big_n = problem.domain_sizes();
    let mut out = Vec::new();
    for (v, var) in problem.variables.iter().enumerate() {
        let vc = &var.vc;
        let (t, _) = problem.unit_shrinkage(v, n, blocks[v].as_deref())?;
        for (d, th) in var.thresholds.iter().enumerate() {
            let Some(th) = th else { continue };
            let v_star = th.v_star(big_n[d]);
            let nd = n[d].max(0.0);
            let derivative = if blocks[v].is_none() {
                if nd > 0.0 && vc.sigma2_u > 0.0 {
                    let a = vc.sigma2 / nd;
                    vc.sigma2 * vc.sigma2_u / v_star * (a / nd) / (a + vc.sigma2_u).powi(2)
                } else {
                    vc.sigma2 * vc.phi() / v_star
                }
            } else {
                vc.sigma2 * (t[d] - nd * t[d] * t[d]) / v_star
            };
            // The map in V* form, differenced in n_d alone.
            let map = |x: f64| -> Result<f64> {
                let mut m = n.to_vec();
                m[d] = x;
                let (t, _) = problem.unit_shrinkage(v, &m, blocks[v].as_deref())?;
                Ok(vc.sigma2 * t[d] * x / v_star)
            };
            let empirical = if difference {
                let h = 1e-4 * nd.max(1.0);
                let lo = (nd - h).max(0.0);
                (map(nd + h)? - map(lo)?) / (nd + h - lo)
            } else {
                f64::NAN
            };
            out.push(ContractionReport {
                variable: v,
                domain: d,
                n: nd,
                v_star,
                loose_bound: vc.sigma2_u / v_star,
                derivative,
                empirical,
                contracting: derivative < 1.0,
            });
        }
    }
    Ok(out)
}

fn initial_sizes(problem: &DesignProblem) -> (Vec<f64>, Option<Vec<f64>>) {
    let big_n = problem.domain_sizes();
    match &problem.options.init {
        Initialization::Fraction(f) => {
            let x: Vec<f64> = problem
                .cells
                .iter()
                .map(|c| (f * c.size).clamp(problem.options.pi_min * c.size, c.upper))
                .collect();
            (problem.domain_sample_sizes(&x), Some(x))
        }
        Initialization::Uniform(c) => (big_n.iter().map(|&nd| c.min(nd)).collect(), None),
        Initialization::Explicit(n) => (n.clone(), None),
    }
}

/// Iterates `n^t = g(n^{t-1})` through a covering program per step.
///
/// Stops when `sum |pi^t - pi^{t-1}| <= epsilon`, the domain sizes moved by
/// at most `domain_tolerance` in total and every g1 target holds within
/// `feasibility_tolerance`. Random-mean problems are accepted too, for
/// cross-validation against the direct solver.
pub fn solve_fixed_point(problem: &DesignProblem) -> Result<AllocationResult> {
    problem.validate()?;
    let opts = &problem.options;
    let blocks = blocks(problem)?;
    let (mut n_prev, mut x_prev) = initial_sizes(problem);
    if n_prev.len() != problem.domains.len() {
        return Err(crate::error::Error::InvalidProblem(format!(
            "explicit initialization has {} sizes for {} domains",
            n_prev.len(),
            problem.domains.len()
        )));
    }
    let cap = capacity(problem);
    let mut trace = Vec::new();
    let mut increases = 0;
    let mut last_stat: Option<f64> = None;
    let mut x = problem.lower_bounds();

    for t in 1..=opts.max_iterations {
        let map = update_map(problem, &blocks, &n_prev)?;
        let mut b = vec![0.0_f64; problem.domains.len()];
        let mut setter = vec![0; problem.domains.len()];
        for (v, row) in map.iter().enumerate() {
            for (d, g) in row.iter().enumerate() {
                if let Some(g) = *g {
                    if g > b[d] {
                        b[d] = g;
                        setter[d] = v;
                    }
                }
            }
        }
        let violations: Vec<Violation> = (0..b.len())
            .filter(|&d| b[d] > cap[d] * (1.0 + 1e-9) + 1e-9)
            .map(|d| Violation {
                variable: setter[d],
                domain: d,
                domain_name: problem.domains.qualified_name(d),
                required: b[d],
                available: cap[d],
            })
            .collect();
        if !violations.is_empty() {
            let contraction = contraction_at(problem, &blocks, &n_prev)?;
            return problem.finish(
                SolverKind::FixedPoint,
                problem.upper_bounds(),
                Status::Infeasible,
                violations,
                trace,
                contraction,
            );
        }

        x = cover(problem, &b)?;
        let n = problem.domain_sample_sizes(&x);
        let stat = x_prev
            .as_ref()
            .map(|xp| x.iter().zip(xp).map(|(a, b)| (a - b).abs()).sum::<f64>());
        let domain_change: f64 = n.iter().zip(&n_prev).map(|(a, b)| (a - b).abs()).sum();
        let max_violation = problem.max_violation(&n, &blocks)?;
        trace.push(TraceRow {
            iteration: t,
            cost: problem.cost(&x),
            max_violation,
            stop_statistic: stat,
            domain_change,
            norm: x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });

        let vacuous = b.iter().all(|&v| v == 0.0);
        let settled = stat.is_some_and(|s| s <= opts.epsilon)
            && domain_change <= opts.domain_tolerance
            && max_violation <= opts.feasibility_tolerance;
        if vacuous || settled {
            let contraction = contraction_at(problem, &blocks, &n)?;
            return problem.finish(SolverKind::FixedPoint, x, Status::Optimal, vec![], trace, contraction);
        }
        // Growth is expected while the map is still expanding, so only
        // increases inside the contracting region count.
        let contracting = reports(problem, &blocks, &n_prev, false)?
            .iter()
            .all(|r| r.contracting);
        match (stat, last_stat) {
            (Some(s), Some(p)) if s > p && contracting => increases += 1,
            _ => increases = 0,
        }
        if increases >= opts.divergence_window {
            let contraction = contraction_at(problem, &blocks, &n)?;
            return problem.finish(SolverKind::FixedPoint, x, Status::Diverged, vec![], trace, contraction);
        }
        last_stat = stat;
        x_prev = Some(x.clone());
        n_prev = n;
    }
    let n = problem.domain_sample_sizes(&x);
    let contraction = contraction_at(problem, &blocks, &n)?;
    problem.finish(SolverKind::FixedPoint, x, Status::MaxIterations, vec![], trace, contraction)
}

/// Runs one step from `n_prev` and returns the resulting state.
pub fn fixed_point_step(problem: &DesignProblem, n_prev: &[f64], iteration: usize) -> Result<FixedPointState> {
    let blocks = blocks(problem)?;
    let map = update_map(problem, &blocks, n_prev)?;
    let b: Vec<f64> = (0..problem.domains.len())
        .map(|d| map.iter().filter_map(|row| row[d]).fold(0.0, f64::max))
        .collect();
    let x = cover(problem, &b)?;
    let mut gamma = Vec::with_capacity(problem.variables.len());
    for v in 0..problem.variables.len() {
        let (t, _) = problem.unit_shrinkage(v, n_prev, blocks[v].as_deref())?;
        gamma.push(t.iter().zip(n_prev).map(|(a, b)| a * b).collect());
    }
    Ok(FixedPointState {
        iteration,
        x,
        n_prev: n_prev.to_vec(),
        gamma,
        stop_statistic: None,
    })
}
