use super::lp::CoverLp;
use super::{AllocationResult, DesignProblem, SolverKind, Status};
use crate::error::{Error, Result, Violation};
use crate::mse::{self, G1Mode, VarianceComponents};

/// Smallest `n` with `g1(n) <= g1*` under the random-mean model.
///
/// In approximate mode this is `(sigma2 / sigma2_u)(sigma2_u / V* - 1)`,
/// clipped at zero. Exact mode has no closed form and is bisected on
/// `[0, N_d]`, where g1 decreases to zero.
pub(crate) fn required_size(big_n: f64, g1_star: f64, vc: &VarianceComponents, mode: G1Mode) -> f64 {
    if vc.sigma2_u == 0.0 {
        return 0.0;
    }
    let v_star = g1_star / (big_n * big_n);
    match mode {
        G1Mode::Approx => (vc.sigma2 / vc.sigma2_u * (vc.sigma2_u / v_star - 1.0)).max(0.0),
        G1Mode::Exact => {
            let g1 = |n: f64| mse::g1_random_mean(big_n, n, vc, G1Mode::Exact).unwrap_or(0.0);
            if g1(0.0) <= g1_star {
                return 0.0;
            }
            let (mut lo, mut hi) = (0.0, big_n);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g1(mid) > g1_star {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-12 * big_n {
                    break;
                }
            }
            hi
        }
    }
}

/// Per-domain requirement and the variable that sets it.
pub(crate) fn requirements(problem: &DesignProblem) -> Vec<(f64, usize)> {
    let big_n = problem.domain_sizes();
    let mut out = vec![(0.0, 0); problem.domains.len()];
    for (v, d, t) in problem.targeted() {
        let req = required_size(big_n[d], t.g1_star, &problem.variables[v].vc, problem.options.g1_mode);
        if req > out[d].0 {
            out[d] = (req, v);
        }
    }
    out
}

/// Minimum expected domain sizes meeting every g1 target, maximized over
/// variables. Untargeted domains get zero.
pub fn min_domain_sizes(problem: &DesignProblem) -> Result<Vec<f64>> {
    let big_n = problem.domain_sizes();
    let req = requirements(problem);
    for (d, &(n, v)) in req.iter().enumerate() {
        if n > big_n[d] * (1.0 + 1e-9) {
            return Err(Error::InfeasibleDomain(Violation {
                variable: v,
                domain: d,
                domain_name: problem.domains.qualified_name(d),
                required: n,
                available: big_n[d],
            }));
        }
    }
    Ok(req.into_iter().map(|(n, _)| n).collect())
}

/// Largest expected sample size the design can put in each domain.
pub(crate) fn capacity(problem: &DesignProblem) -> Vec<f64> {
    let upper = problem.upper_bounds();
    let mut cap = vec![0.0; problem.domains.len()];
    for (c, u) in problem.cells.iter().zip(&upper) {
        for &(d, w) in &c.coverage {
            cap[d] += w * u;
        }
    }
    cap
}

/// Pairs whose requirement exceeds the capacity.
pub(crate) fn violations(problem: &DesignProblem, req: &[(f64, usize)]) -> Vec<Violation> {
    let cap = capacity(problem);
    req.iter()
        .enumerate()
        .filter(|(d, &(n, _))| n > cap[*d] * (1.0 + 1e-9) + 1e-9)
        .map(|(d, &(n, v))| Violation {
            variable: v,
            domain: d,
            domain_name: problem.domains.qualified_name(d),
            required: n,
            available: cap[d],
        })
        .collect()
}

/// Cost minimization under `n_d >= b_d`.
pub(crate) fn cover(problem: &DesignProblem, b: &[f64]) -> Result<Vec<f64>> {
    let mut rows = vec![Vec::new(); problem.domains.len()];
    for (c, cell) in problem.cells.iter().enumerate() {
        for &(d, w) in &cell.coverage {
            rows[d].push((c, w));
        }
    }
    let (rows, rhs): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .zip(b.iter().copied())
        .filter(|(_, b)| *b > 0.0)
        .unzip();
    CoverLp {
        cost: problem.cells.iter().map(|c| c.cost).collect(),
        rows,
        rhs,
        lower: problem.lower_bounds(),
        upper: problem.upper_bounds(),
    }
    .solve()
}

/// Exact linear reduction for the random-mean family: each g1 target is the
/// lower bound `n_d >= n_min`, so the allocation is one covering program.
pub fn solve_direct(problem: &DesignProblem) -> Result<AllocationResult> {
    if !problem.mode.is_random_mean() {
        return Err(Error::InvalidProblem(
            "the direct solver needs a random-mean design; use the fixed-point solver".into(),
        ));
    }
    problem.validate()?;
    let req = requirements(problem);
    let viol = violations(problem, &req);
    if !viol.is_empty() {
        let x = problem.upper_bounds();
        return problem.finish(SolverKind::Direct, x, Status::Infeasible, viol, vec![], vec![]);
    }
    let b: Vec<f64> = req.iter().map(|r| r.0).collect();
    let x = cover(problem, &b)?;
    problem.finish(SolverKind::Direct, x, Status::Optimal, vec![], vec![], vec![])
}

#[cfg(test)]
mod tests {
    use super::super::tests::nested;
    use super::*;

    fn vc() -> VarianceComponents {
        VarianceComponents::new(0.1958, 0.0005).unwrap()
    }

    #[test]
    fn closed_form_minimum_sizes() {
        let t = 0.07_f64 * 0.28;
        let n = required_size(800.0, (t * 800.0).powi(2), &vc(), G1Mode::Approx);
        let oracle = 0.1958 / 0.0005 * (0.0005 / (t * t) - 1.0);
        assert!((n - oracle).abs() < 1e-9 && (n - 118.08).abs() < 0.01, "{n}");
        let n = required_size(5000.0, (0.05 * 0.28 * 5000.0_f64).powi(2), &vc(), G1Mode::Approx);
        assert!((n - 607.4).abs() < 0.1, "{n}");
    }

    #[test]
    fn boundary_requirement_is_the_census() {
        let v = vc();
        let g1 = mse::g1_random_mean(500.0, 500.0, &v, G1Mode::Approx).unwrap();
        let n = required_size(500.0, g1, &v, G1Mode::Approx);
        assert!((n - 500.0).abs() < 1e-8);
    }

    #[test]
    fn exact_mode_needs_fewer_units() {
        let v = vc();
        let g = (0.07 * 0.28 * 800.0_f64).powi(2);
        let exact = required_size(800.0, g, &v, G1Mode::Exact);
        let g1 = mse::g1_random_mean(800.0, exact, &v, G1Mode::Exact).unwrap();
        assert!((g1 / g - 1.0).abs() < 1e-9);
        assert!(exact < required_size(800.0, g, &v, G1Mode::Approx));
    }

    #[test]
    fn nested_layout_meets_every_bound() {
        let sizes = [800.0, 900.0, 1500.0, 2400.0, 9000.0, 700.0];
        let p = nested(&sizes, &[0, 0, 0, 1, 1, 1], 0.07, 0.05);
        let r = solve_direct(&p).unwrap();
        assert_eq!(r.status, Status::Optimal);
        for d in 0..6 {
            assert!(r.domain_n[d] >= 118.08 - 0.01);
        }
        // three A-domains give only 354 < 607: both aggregates bind
        assert!((r.domain_n[6] - 607.4).abs() < 0.1 && (r.domain_n[7] - 607.4).abs() < 0.1);
        assert!((r.cost - r.domain_n[6] - r.domain_n[7]).abs() < 1e-6);
        assert!(r.max_violation <= 1e-9);
    }

    #[test]
    fn infeasible_domains_are_listed() {
        let p = nested(&[100.0, 100.0], &[0, 1], 0.07, 0.05);
        let r = solve_direct(&p).unwrap();
        assert_eq!(r.status, Status::Infeasible);
        assert!(r.violations.iter().any(|v| v.domain == 0 && v.available == 100.0));
        assert!(matches!(min_domain_sizes(&p), Err(Error::InfeasibleDomain(_))));
    }

    mod props {
        use super::super::super::tests::nested;
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Either every threshold holds within the population bounds or the
            /// problem is reported infeasible.
            #[test]
            fn solution_covers_every_target(
                cells in proptest::collection::vec((50.0f64..20_000.0, 0usize..2), 2..12),
                r_a in 0.03f64..0.2,
                r_b in 0.02f64..0.1,
            ) {
                let sizes: Vec<f64> = cells.iter().map(|c| c.0.round()).collect();
                let mut groups: Vec<usize> = cells.iter().map(|c| c.1).collect();
                // both aggregates need members
                groups[0] = 0;
                groups[1] = 1;
                let p = nested(&sizes, &groups, r_a, r_b);
                let r = solve_direct(&p).unwrap();
                match r.status {
                    Status::Infeasible => prop_assert!(!r.violations.is_empty()),
                    _ => {
                        let e = p.evaluate(&r.decision()).unwrap();
                        prop_assert!(e.max_violation <= 1e-6, "{}", e.max_violation);
                        for c in &r.cells {
                            prop_assert!(c.n >= -1e-9 && c.n <= c.size * (1.0 + 1e-9));
                        }
                        let s: f64 = r.cells.iter().map(|c| c.n).sum();
                        prop_assert!((s - r.cost).abs() <= 1e-6 * r.cost.max(1.0));
                    }
                }
            }
        }
    }
}
