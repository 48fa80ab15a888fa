//! Minimum-cost allocations under per-domain MSE thresholds.
//!
//! Every design mode reduces to the same decision: the expected sample size
//! `x_c` of each cell (a group of identical units, a stratum, or a stratum of
//! clusters with a fixed take `n_bar`). Domain sizes are linear in it,
//! `n_d = sum_c a_dc x_c`, with `a_dc` the incidence or the membership
//! probability. Once the shrinkage factors are fixed, each g1 constraint is a
//! lower bound on `n_d`, which is what both solvers exploit.

mod cobyla_check;
mod direct;
mod fixed_point;
mod lp;

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::frame::{DomainStructure, StratumTable, UnitFrame};
use crate::mse::{
    self, G1Mode, MseEntry, MseReport, OmegaSpec, Threshold, VarianceComponents,
};

pub use cobyla_check::solve_cobyla_check;
pub use direct::{min_domain_sizes, solve_direct};
pub use fixed_point::{contraction_check, fixed_point_step, solve_fixed_point, FixedPointState};

/// Runs `solver` on `problem`. The proportional allocation needs a total
/// and goes through [`DesignProblem::proportional`] instead.
pub fn solve(problem: &DesignProblem, solver: SolverKind) -> Result<AllocationResult> {
    match solver {
        SolverKind::Direct => solve_direct(problem),
        SolverKind::FixedPoint => solve_fixed_point(problem),
        SolverKind::CobylaCheck => solve_cobyla_check(problem),
        SolverKind::Proportional => Err(Error::InvalidProblem("proportional allocation needs a total sample size".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    /// Unit inclusion probabilities.
    Unit,
    Stratified,
    TwoStage,
    /// Stratum sizes with modeled domain membership.
    Uncertain,
    /// General unit-level mixed model, solved by fixed-point iteration.
    LmmFixedPoint,
}

impl DesignMode {
    pub fn is_random_mean(self) -> bool {
        self != DesignMode::LmmFixedPoint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Direct,
    FixedPoint,
    CobylaCheck,
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// `pi^0 = f` for every unit, so `n_0d = f N_d`.
    Fraction(f64),
    /// `n_0d = c` in every domain.
    Uniform(f64),
    /// Explicit `n_0d` per domain.
    Explicit(Vec<f64>),
}

impl Default for Initialization {
    fn default() -> Self {
        Initialization::Uniform(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Threshold on `sum_i |pi_i^t - pi_i^{t-1}|`.
    pub epsilon: f64,
    /// Threshold on `sum_d |n_d^t - n_d^{t-1}|`.
    pub domain_tolerance: f64,
    /// Largest admissible relative excess `g1 / g1* - 1`.
    pub feasibility_tolerance: f64,
    pub max_iterations: usize,
    /// Consecutive increases of the stopping statistic, counted while the
    /// map is locally contracting, that flag divergence.
    pub divergence_window: usize,
    /// Lower bound on inclusion probabilities, keeping `0 < pi`.
    pub pi_min: f64,
    pub init: Initialization,
    pub g1_mode: G1Mode,
    pub cobyla_max_eval: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            epsilon: 5.0,
            domain_tolerance: 0.5,
            feasibility_tolerance: 1e-6,
            max_iterations: 200,
            divergence_window: 5,
            pi_min: 1e-6,
            init: Initialization::default(),
            g1_mode: G1Mode::Approx,
            cobyla_max_eval: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub sigma2: f64,
    pub sigma2_u: f64,
    #[serde(default)]
    pub omega: OmegaSpec,
}

/// Threshold rule over a partition or one of its domains. Later rules win.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetRule {
    /// Variable name; all variables when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    pub partition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_anchor: Option<f64>,
    /// `Y_d = anchor_factor * N_d` when no explicit anchor is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSpec {
    /// Fixed number of units taken in every selected cluster.
    pub n_bar: usize,
}

/// Problem description as read from JSON; the population side comes from a
/// frame or a stratum table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub mode: DesignMode,
    pub variables: Vec<VariableSpec>,
    pub targets: Vec<TargetRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageSpec>,
    #[serde(default)]
    pub options: SolverOptions,
}

impl ProblemSpec {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A group of units sharing cost and domain profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    /// Population count `N_c`.
    pub size: f64,
    pub cost: f64,
    /// Nonzero `(domain, a_dc)` pairs.
    pub coverage: Vec<(usize, f64)>,
    /// Largest expected sample size: `N_c`, or `n_bar M_h` for two-stage.
    pub upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    /// Unit ids, unit mode only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub vc: VarianceComponents,
    pub thresholds: Vec<Option<Threshold>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignProblem {
    pub mode: DesignMode,
    pub domains: DomainStructure,
    pub cells: Vec<Cell>,
    pub variables: Vec<Variable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bar: Option<f64>,
    pub options: SolverOptions,
}

impl DesignProblem {
    /// Builds the problem from a unit frame. Unit mode groups identical
    /// units; the other modes use the frame's strata.
    pub fn from_frame(frame: &UnitFrame, spec: &ProblemSpec) -> Result<Self> {
        if spec.mode != DesignMode::Unit {
            return Self::from_table(&crate::frame::build_strata(frame)?, spec);
        }
        let domains = frame.domains();
        let mut index: HashMap<Vec<(usize, u64)>, usize> = HashMap::new();
        let mut cells: Vec<Cell> = Vec::new();
        for u in frame.units() {
            let mut coverage: Vec<(usize, f64)> = u
                .memberships
                .iter()
                .map(|&d| (d, 1.0))
                .chain(u.membership_probs.iter().copied().filter(|p| p.1 > 0.0))
                .collect();
            coverage.sort_by_key(|p| p.0);
            let mut key: Vec<(usize, u64)> = coverage.iter().map(|&(d, w)| (d, w.to_bits())).collect();
            key.push((usize::MAX, u.cost.to_bits()));
            let c = *index.entry(key).or_insert_with(|| {
                cells.push(Cell {
                    id: format!("g{}", cells.len() + 1),
                    size: 0.0,
                    cost: u.cost,
                    coverage,
                    upper: 0.0,
                    clusters: None,
                    members: Vec::new(),
                });
                cells.len() - 1
            });
            cells[c].size += 1.0;
            cells[c].upper += 1.0;
            cells[c].members.push(u.id.clone());
        }
        Self::assemble(spec, domains.clone(), cells)
    }

    pub fn from_table(table: &StratumTable, spec: &ProblemSpec) -> Result<Self> {
        let n_bar = spec.two_stage.as_ref().map(|t| t.n_bar as f64);
        let mut cells = Vec::with_capacity(table.len());
        for s in &table.strata {
            let size = s.size as f64;
            let (upper, clusters) = match spec.mode {
                DesignMode::TwoStage => {
                    let nb = n_bar.ok_or_else(|| {
                        Error::InvalidProblem("two-stage mode needs `two_stage.n_bar`".into())
                    })?;
                    if s.clusters.is_empty() {
                        return Err(Error::InvalidProblem(format!("stratum `{}` has no clusters", s.id)));
                    }
                    let m = s.clusters.len();
                    (size.min(nb * m as f64), Some(m))
                }
                _ => (size, None),
            };
            cells.push(Cell {
                id: s.id.clone(),
                size,
                cost: s.cost,
                coverage: s.coverage.clone(),
                upper,
                clusters,
                members: Vec::new(),
            });
        }
        Self::assemble(spec, table.domains.clone(), cells)
    }

    fn assemble(spec: &ProblemSpec, domains: DomainStructure, cells: Vec<Cell>) -> Result<Self> {
        if spec.variables.is_empty() {
            return Err(Error::InvalidProblem("no variables".into()));
        }
        let n_bar = spec.two_stage.as_ref().map(|t| t.n_bar as f64);
        if spec.mode == DesignMode::TwoStage && !matches!(n_bar, Some(nb) if nb >= 1.0) {
            return Err(Error::InvalidProblem("two-stage mode needs n_bar >= 1".into()));
        }
        let fractional = cells
            .iter()
            .any(|c| c.coverage.iter().any(|&(_, w)| w != 1.0));
        if fractional && spec.mode != DesignMode::Uncertain && spec.mode != DesignMode::Unit {
            return Err(Error::InvalidProblem(
                "membership probabilities require the uncertain or unit mode".into(),
            ));
        }
        let mut problem = DesignProblem {
            mode: spec.mode,
            domains,
            cells,
            variables: Vec::new(),
            n_bar: if spec.mode == DesignMode::TwoStage { n_bar } else { None },
            options: spec.options.clone(),
        };
        let big_n = problem.domain_sizes();
        for vs in &spec.variables {
            let vc = VarianceComponents::new(vs.sigma2, vs.sigma2_u)?.with_omega(vs.omega.clone());
            let mut thresholds = vec![None; problem.domains.len()];
            for rule in &spec.targets {
                if rule.variable.as_ref().is_some_and(|v| *v != vs.name) {
                    continue;
                }
                let p = problem
                    .domains
                    .partition_index(&rule.partition)
                    .ok_or_else(|| Error::UnknownDomain(rule.partition.clone()))?;
                let targets: Vec<usize> = match &rule.domain {
                    Some(label) => vec![problem
                        .domains
                        .find(p, label)
                        .ok_or_else(|| Error::UnknownDomain(label.clone()))?],
                    None => problem.domains.partitions()[p].domains.clone(),
                };
                for d in targets {
                    let t = match (rule.g1_star, rule.r_star) {
                        (Some(g), _) => Threshold::absolute(g)?,
                        (None, Some(r)) => {
                            let y = match (rule.y_anchor, rule.anchor_factor) {
                                (Some(y), _) => y,
                                (None, Some(f)) => f * big_n[d],
                                (None, None) => {
                                    return Err(Error::InvalidProblem(format!(
                                        "relative target on `{}` needs y_anchor or anchor_factor",
                                        rule.partition
                                    )))
                                }
                            };
                            Threshold::relative(r, y)?
                        }
                        (None, None) => {
                            return Err(Error::InvalidProblem(format!(
                                "target on `{}` needs g1_star or r_star",
                                rule.partition
                            )))
                        }
                    };
                    if big_n[d] <= 0.0 {
                        return Err(Error::InvalidProblem(format!(
                            "targeted domain `{}` has no population",
                            problem.domains.qualified_name(d)
                        )));
                    }
                    thresholds[d] = Some(t);
                }
            }
            problem.variables.push(Variable {
                name: vs.name.clone(),
                vc,
                thresholds,
            });
        }
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            if !(c.size > 0.0) || !(c.cost > 0.0) || !(c.upper > 0.0) || c.upper > c.size * (1.0 + 1e-12) {
                return Err(Error::InvalidProblem(format!("cell `{}` has invalid size, cost or bound", c.id)));
            }
            if c.coverage.iter().any(|&(d, w)| d >= self.domains.len() || !(0.0..=1.0).contains(&w)) {
                return Err(Error::InvalidProblem(format!("cell `{}` has invalid coverage", c.id)));
            }
        }
        for v in &self.variables {
            v.vc.validate()?;
            if v.thresholds.len() != self.domains.len() {
                return Err(Error::InvalidProblem("threshold vector has wrong length".into()));
            }
        }
        if !(self.options.pi_min > 0.0 && self.options.pi_min < 1.0) {
            return Err(Error::InvalidProblem("pi_min must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `N_d = sum_c a_dc N_c`.
    pub fn domain_sizes(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.domains.len()];
        for c in &self.cells {
            for &(d, w) in &c.coverage {
                out[d] += w * c.size;
            }
        }
        out
    }

    /// `n_d = sum_c a_dc x_c`.
    pub fn domain_sample_sizes(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domains.len()];
        for (c, &xc) in self.cells.iter().zip(x) {
            for &(d, w) in &c.coverage {
                out[d] += w * xc;
            }
        }
        out
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        self.cells.iter().zip(x).map(|(c, &xc)| c.cost * xc).sum()
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.cells.iter().map(|c| (self.options.pi_min * c.size).min(c.upper)).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.upper).collect()
    }

    pub fn population(&self) -> f64 {
        self.cells.iter().map(|c| c.size).sum()
    }

    pub fn targeted(&self) -> impl Iterator<Item = (usize, usize, &Threshold)> + '_ {
        self.variables.iter().enumerate().flat_map(|(v, var)| {
            var.thresholds
                .iter()
                .enumerate()
                .filter_map(move |(d, t)| t.as_ref().map(|t| (v, d, t)))
        })
    }

    /// Omega blocks of variable `v`, one per partition.
    pub fn omega_blocks(&self, v: usize) -> Result<Vec<DMatrix<f64>>> {
        let vc = &self.variables[v].vc;
        self.domains
            .partitions()
            .iter()
            .map(|p| {
                let spec = if vc.omega.applies_to(&p.name) {
                    vc.omega.clone()
                } else {
                    OmegaSpec::anova()
                };
                mse::omega_matrix(&spec, vc, p.domains.len())
            })
            .collect()
    }

    /// Diagonal of `T*` for variable `v` at domain sizes `n`, so that
    /// `gamma_d = n_d t_dd`, and the `T*` blocks when the mixed model is in
    /// use. Random-mean designs use `t_dd = sigma2_u / (sigma2 + n_d sigma2_u)`.
    pub(crate) fn unit_shrinkage(
        &self,
        v: usize,
        n: &[f64],
        blocks: Option<&[DMatrix<f64>]>,
    ) -> Result<(Vec<f64>, Option<Vec<DMatrix<f64>>>)> {
        let vc = &self.variables[v].vc;
        match blocks {
            None => Ok((
                n.iter()
                    .map(|&nd| vc.sigma2_u / (vc.sigma2 + nd.max(0.0) * vc.sigma2_u))
                    .collect(),
                None,
            )),
            Some(blocks) => {
                let mut diag = vec![0.0; n.len()];
                let mut ts = Vec::with_capacity(blocks.len());
                for (p, omega) in self.domains.partitions().iter().zip(blocks) {
                    let np: Vec<f64> = p.domains.iter().map(|&d| n[d]).collect();
                    let t = mse::t_star(&np, omega)?;
                    for (k, &d) in p.domains.iter().enumerate() {
                        diag[d] = t[(k, k)];
                    }
                    ts.push(t);
                }
                Ok((diag, Some(ts)))
            }
        }
    }

    /// Omega blocks when the design uses the mixed model.
    pub(crate) fn model_blocks(&self, v: usize) -> Result<Option<Vec<DMatrix<f64>>>> {
        if self.mode == DesignMode::LmmFixedPoint {
            self.omega_blocks(v).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Leading factor of g1: `N_d^2`, or `(N_d - n_d)^2` in exact mode.
    pub(crate) fn lead(&self, big_n: f64, n: f64) -> f64 {
        match self.options.g1_mode {
            G1Mode::Approx => big_n * big_n,
            G1Mode::Exact => (big_n - n).max(0.0).powi(2),
        }
    }

    /// `max (g1 / g1* - 1)` over targeted pairs at domain sizes `n`.
    pub(crate) fn max_violation(&self, n: &[f64], blocks: &[Option<Vec<DMatrix<f64>>>]) -> Result<f64> {
        let big_n = self.domain_sizes();
        let mut worst = f64::NEG_INFINITY;
        for (v, var) in self.variables.iter().enumerate() {
            let (t, _) = self.unit_shrinkage(v, n, blocks[v].as_deref())?;
            for (d, th) in var.thresholds.iter().enumerate() {
                if let Some(th) = th {
                    let g1 = self.lead(big_n[d], n[d]) * var.vc.sigma2 * t[d];
                    worst = worst.max(g1 / th.g1_star - 1.0);
                }
            }
        }
        Ok(if worst == f64::NEG_INFINITY { 0.0 } else { worst })
    }

    /// Recomputes every MSE component at `x` from the mse calculators.
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let n = self.domain_sample_sizes(x);
        let big_n = self.domain_sizes();
        let mut reports = Vec::with_capacity(self.variables.len());
        let mut max_violation = f64::NEG_INFINITY;
        let mut binding = Vec::with_capacity(self.variables.len());
        for (v, var) in self.variables.iter().enumerate() {
            let vc = &var.vc;
            let blocks = self.model_blocks(v)?;
            let (t, ts) = self.unit_shrinkage(v, &n, blocks.as_deref())?;
            let gam: Vec<f64> = n.iter().zip(&t).map(|(a, b)| a * b).collect();
            let mut entries = Vec::with_capacity(n.len());
            let mut bind = vec![false; n.len()];
            for (pi, part) in self.domains.partitions().iter().enumerate() {
                let n_part: f64 = part.domains.iter().map(|&d| n[d]).sum();
                let sizes: Vec<(f64, f64)> = part.domains.iter().map(|&d| (n[d], gam[d])).collect();
                for (k, &d) in part.domains.iter().enumerate() {
                    let nd = n[d].min(big_n[d]);
                    let g1 = match &ts {
                        Some(_) if nd > 0.0 && self.options.g1_mode == G1Mode::Approx => {
                            mse::g1_lmm(big_n[d], nd, gam[d], vc)?
                        }
                        Some(_) => self.lead(big_n[d], nd) * vc.sigma2 * t[d],
                        None => mse::g1_random_mean(big_n[d], nd, vc, self.options.g1_mode)?,
                    };
                    let g2 = if n_part <= 0.0 {
                        0.0
                    } else if let Some(ts) = &ts {
                        // intercept-only mixed-model g2
                        let t = &ts[pi];
                        let np: Vec<f64> = part.domains.iter().map(|&e| n[e]).collect();
                        let tn: f64 = (0..np.len()).map(|j| t[(k, j)] * np[j]).sum();
                        let mxx: f64 = n_part
                            - (0..np.len())
                                .map(|i| np[i] * (0..np.len()).map(|j| t[(i, j)] * np[j]).sum::<f64>())
                                .sum::<f64>();
                        let r = (big_n[d] - nd).max(0.0) * (1.0 - tn);
                        if mxx > 0.0 {
                            vc.sigma2 * r * r / mxx
                        } else {
                            0.0
                        }
                    } else {
                        mse::g2_random_mean(big_n[d], nd, n_part, &sizes, vc, mse::G2Form::AsPrinted)?
                    };
                    let threshold = var.thresholds[d].as_ref();
                    if let Some(t) = threshold {
                        let rel = g1 / t.g1_star - 1.0;
                        max_violation = max_violation.max(rel);
                        bind[d] = rel >= -1e-5;
                    }
                    entries.push(MseEntry::new(
                        d,
                        self.domains.qualified_name(d),
                        big_n[d],
                        n[d],
                        gam[d],
                        g1,
                        g2,
                        threshold,
                    ));
                }
            }
            entries.sort_by_key(|e| e.domain);
            reports.push(MseReport {
                variable: var.name.clone(),
                entries,
            });
            binding.push(bind);
        }
        if max_violation == f64::NEG_INFINITY {
            max_violation = 0.0;
        }
        Ok(Evaluation {
            domain_n: n,
            reports,
            max_violation,
            binding,
        })
    }

    /// The allocation `x_c = total N_c / N`.
    pub fn proportional(&self, total: f64) -> Result<AllocationResult> {
        let pop = self.population();
        if !(total >= 0.0) || total > pop * (1.0 + 1e-12) {
            return Err(Error::InvalidProblem(format!("total {total} outside [0, {pop}]")));
        }
        let x: Vec<f64> = self
            .cells
            .iter()
            .map(|c| (total * c.size / pop).min(c.upper))
            .collect();
        self.finish(SolverKind::Proportional, x, Status::Optimal, Vec::new(), Vec::new(), Vec::new())
    }

    pub(crate) fn finish(
        &self,
        solver: SolverKind,
        x: Vec<f64>,
        mut status: Status,
        violations: Vec<Violation>,
        trace: Vec<TraceRow>,
        contraction: Vec<ContractionReport>,
    ) -> Result<AllocationResult> {
        let eval = self.evaluate(&x)?;
        if status == Status::Optimal
            && solver != SolverKind::Proportional
            && eval.max_violation > self.options.feasibility_tolerance
        {
            return Err(Error::Solver(format!(
                "solution violates a g1 constraint by {:e}",
                eval.max_violation
            )));
        }
        if !violations.is_empty() {
            status = Status::Infeasible;
        }
        let cells = self
            .cells
            .iter()
            .zip(&x)
            .map(|(c, &xc)| CellAllocation {
                id: c.id.clone(),
                size: c.size,
                n: xc,
                pi: xc / c.size,
                m: self.n_bar.map(|nb| xc / nb),
                take_all: xc >= c.upper * (1.0 - 1e-9),
                members: c.members.clone(),
            })
            .collect();
        Ok(AllocationResult {
            solver,
            mode: self.mode,
            status,
            cost: self.cost(&x),
            total_n: x.iter().sum(),
            n_bar: self.n_bar,
            cells,
            domain_names: (0..self.domains.len()).map(|d| self.domains.qualified_name(d)).collect(),
            domain_sizes: self.domain_sizes(),
            domain_n: eval.domain_n,
            reports: eval.reports,
            binding: eval.binding,
            max_violation: eval.max_violation,
            violations,
            iterations: trace.len(),
            trace,
            contraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub domain_n: Vec<f64>,
    pub reports: Vec<MseReport>,
    /// `max (g1 / g1* - 1)` over targeted pairs; nonpositive when feasible.
    pub max_violation: f64,
    pub binding: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAllocation {
    pub id: String,
    pub size: f64,
    /// Expected sample size in the cell.
    pub n: f64,
    /// Unit inclusion probability `n / N`.
    pub pi: f64,
    /// Clusters to select, two-stage only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    pub take_all: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub max_violation: f64,
    /// `sum_i |pi_i^t - pi_i^{t-1}|`, undefined when `pi^0` is not given
    /// per unit.
    pub stop_statistic: Option<f64>,
    pub domain_change: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub variable: usize,
    pub domain: usize,
    /// Domain size at which the derivative is evaluated.
    pub n: f64,
    pub v_star: f64,
    /// `sigma2_u / V*`.
    pub loose_bound: f64,
    /// Derivative of the update map in `n_d`.
    pub derivative: f64,
    /// Central finite difference of the same map.
    pub empirical: f64,
    pub contracting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub solver: SolverKind,
    pub mode: DesignMode,
    pub status: Status,
    pub cost: f64,
    pub total_n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bar: Option<f64>,
    pub cells: Vec<CellAllocation>,
    pub domain_names: Vec<String>,
    pub domain_sizes: Vec<f64>,
    pub domain_n: Vec<f64>,
    pub reports: Vec<MseReport>,
    pub binding: Vec<Vec<bool>>,
    pub max_violation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contraction: Vec<ContractionReport>,
}

impl AllocationResult {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn decision(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.n).collect()
    }

    /// Turns a non-optimal status into the matching error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            Status::Optimal => Ok(self),
            Status::Infeasible => Err(Error::Infeasible(self.violations)),
            Status::MaxIterations => Err(Error::MaxIterations(self.iterations)),
            Status::Diverged => Err(Error::DivergenceDetected(self.iterations)),
        }
    }

    /// Writes the trace as CSV.
    pub fn write_trace<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iteration", "cost", "max_violation", "stop_statistic", "domain_change", "norm"])?;
        for r in &self.trace {
            wtr.write_record([
                r.iteration.to_string(),
                r.cost.to_string(),
                r.max_violation.to_string(),
                r.stop_statistic.map_or(String::new(), |s| s.to_string()),
                r.domain_change.to_string(),
                r.norm.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// One stratum per A-domain, strata grouped into two B-domains.
    pub(crate) fn nested(sizes: &[f64], groups: &[usize], r_a: f64, r_b: f64) -> DesignProblem {
        let na = sizes.len();
        let domains = DomainStructure::new(vec![
            ("A".into(), (0..na).map(|k| format!("a{k}")).collect()),
            ("B".into(), vec!["b1".into(), "b2".into()]),
        ])
        .unwrap();
        let cells = sizes
            .iter()
            .zip(groups)
            .enumerate()
            .map(|(k, (&s, &g))| Cell {
                id: format!("a{k}"),
                size: s,
                cost: 1.0,
                coverage: vec![(k, 1.0), (na + g, 1.0)],
                upper: s,
                clusters: None,
                members: vec![],
            })
            .collect();
        let spec = ProblemSpec {
            mode: DesignMode::Stratified,
            variables: vec![VariableSpec {
                name: "y".into(),
                sigma2: 0.1958,
                sigma2_u: 0.0005,
                omega: OmegaSpec::anova(),
            }],
            targets: vec![
                TargetRule {
                    partition: "A".into(),
                    r_star: Some(r_a),
                    anchor_factor: Some(0.28),
                    ..Default::default()
                },
                TargetRule {
                    partition: "B".into(),
                    r_star: Some(r_b),
                    anchor_factor: Some(0.28),
                    ..Default::default()
                },
            ],
            two_stage: None,
            options: SolverOptions::default(),
        };
        DesignProblem::assemble(&spec, domains, cells).unwrap()
    }

    #[test]
    fn thresholds_follow_rules() {
        let p = nested(&[800.0, 1600.0, 2400.0], &[0, 1, 1], 0.07, 0.05);
        let t = p.variables[0].thresholds[1].unwrap();
        assert_eq!(t.g1_star, (0.07 * (0.28 * 1600.0_f64)).powi(2));
        assert_eq!(p.domain_sizes()[4], 4000.0);
    }

    #[test]
    fn proportional_uniform_sizes() {
        let p = nested(&[500.0; 4], &[0, 0, 1, 1], 0.07, 0.05);
        let r = p.proportional(200.0).unwrap();
        assert!(r.cells.iter().all(|c| (c.n - 50.0).abs() < 1e-12));
        assert!((r.domain_n[4] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_recomputes_g1() {
        let p = nested(&[800.0, 1600.0], &[0, 1], 0.07, 0.05);
        let e = p.evaluate(&[118.0, 118.0]).unwrap();
        let g1 = e.reports[0].entries[0].g1;
        assert!((g1 - 245.90).abs() < 0.01);
        assert!(e.reports[0].entries[0].rap.unwrap() > 0.99);
    }
}
