//! Synthetic populations for experiments and Monte Carlo checks.
//!
//! A base partition of domains (one stratum per domain) is expanded from
//! explicit sizes or from size classes, optionally aggregated into coarser
//! partitions, and filled with values drawn from the random-mean model or a
//! unit-level mixed model with categorical covariates.

use nalgebra::DMatrix;
use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DomainStructure, Unit, UnitFrame};
use crate::error::{Error, Result};
use crate::mse::{omega_matrix, OmegaSpec, VarianceComponents};
use crate::rng::{self, DesignRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub base: BasePartition,
    #[serde(default)]
    pub aggregations: Vec<Aggregation>,
    pub model: PopulationModel,
    #[serde(default = "one")]
    pub cost: f64,
    /// Units per cluster; clusters are consecutive blocks within a stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<CategoricalCovariate>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePartition {
    pub name: String,
    pub prefix: String,
    pub sizes: DomainSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSizes {
    Explicit(Vec<usize>),
    /// Consecutive classes of `count` domains with average size `average`.
    Classes(Vec<SizeClass>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub count: usize,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub name: String,
    pub labels: Vec<String>,
    pub assignment: Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Aggregate index of every base domain.
    Explicit(Vec<usize>),
    /// `class_counts[k][c]` domains of size class `c` go to aggregate `k`,
    /// taken in order within each class.
    ClassCounts(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PopulationModel {
    RandomMean {
        mu: f64,
        sigma2: f64,
        sigma2_u: f64,
    },
    /// `y = x'beta + u_d + e` with `x = (1, dummies...)`, `u ~ N(0, sigma2 Omega)`.
    Lmm {
        beta: Vec<f64>,
        sigma2: f64,
        sigma2_u: f64,
        #[serde(default)]
        omega: OmegaSpec,
    },
}

impl PopulationModel {
    pub fn sigma2(&self) -> f64 {
        match self {
            PopulationModel::RandomMean { sigma2, .. } | PopulationModel::Lmm { sigma2, .. } => *sigma2,
        }
    }

    pub fn sigma2_u(&self) -> f64 {
        match self {
            PopulationModel::RandomMean { sigma2_u, .. } | PopulationModel::Lmm { sigma2_u, .. } => *sigma2_u,
        }
    }

    pub fn omega(&self) -> OmegaSpec {
        match self {
            PopulationModel::RandomMean { .. } => OmegaSpec::anova(),
            PopulationModel::Lmm { omega, .. } => omega.clone(),
        }
    }

    /// Variance components as used by the MSE calculators. Only valid when
    /// `sigma2 > 0`.
    pub fn components(&self) -> Result<VarianceComponents> {
        Ok(VarianceComponents::new(self.sigma2(), self.sigma2_u())?.with_omega(self.omega()))
    }

    fn check(&self) -> Result<()> {
        let (s2, s2u) = (self.sigma2(), self.sigma2_u());
        if !(s2 >= 0.0) || !(s2u >= 0.0) || !s2.is_finite() || !s2u.is_finite() {
            return Err(Error::InvalidSpec(format!("variances must be nonnegative, got {s2}, {s2u}")));
        }
        if let PopulationModel::Lmm { omega, .. } = self {
            omega.validate()?;
        }
        Ok(())
    }

    /// Lower Cholesky factor of `Cov(u)` over `dim` base domains; `None`
    /// for independent effects.
    pub fn effect_factor(&self, dim: usize) -> Result<Option<DMatrix<f64>>> {
        match self {
            PopulationModel::RandomMean { .. } => Ok(None),
            PopulationModel::Lmm { omega, sigma2_u, .. } => {
                if omega.kind == crate::mse::OmegaKind::Anova || *sigma2_u == 0.0 {
                    return Ok(None);
                }
                // sigma2 * phi * Omega(rho) = sigma2_u * Omega(rho)
                let vc = VarianceComponents {
                    sigma2: 1.0,
                    sigma2_u: *sigma2_u,
                    omega: omega.clone(),
                };
                let cov = omega_matrix(omega, &vc, dim)?;
                Ok(Some(cov.cholesky().expect("positive definite").l()))
            }
        }
    }

    /// Draws the base-domain random effects.
    pub fn draw_effects(&self, factor: Option<&DMatrix<f64>>, dim: usize, rng: &mut DesignRng) -> Vec<f64> {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        match factor {
            None => {
                let sd = self.sigma2_u().sqrt();
                z.into_iter().map(|v| v * sd).collect()
            }
            Some(l) => {
                let zv = nalgebra::DVector::from_vec(z);
                (l * zv).iter().copied().collect()
            }
        }
    }

    /// Fixed part `x'beta` (or `mu`) of one unit.
    pub fn fixed_part(&self, covariates: &[f64]) -> f64 {
        match self {
            PopulationModel::RandomMean { mu, .. } => *mu,
            PopulationModel::Lmm { beta, .. } => beta.iter().zip(covariates).map(|(b, x)| b * x).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalCovariate {
    pub name: String,
    /// Level probabilities; the first level is the reference and gets no dummy.
    pub probabilities: Vec<f64>,
}

/// A generated population: the frame plus one realization of the model.
#[derive(Debug, Clone)]
pub struct Population {
    pub frame: UnitFrame,
    pub spec: SyntheticSpec,
    /// Base-partition domain of every unit.
    pub base_domain: Vec<usize>,
    pub y: Vec<f64>,
    /// Random effects of the base domains.
    pub u: Vec<f64>,
}

impl Population {
    /// True domain totals `Y_d = sum_{i in U_d} y_i` for every domain.
    pub fn domain_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.frame.domains().len()];
        for (unit, y) in self.frame.units().iter().zip(&self.y) {
            for &d in &unit.memberships {
                totals[d] += y;
            }
        }
        totals
    }
}

impl SyntheticSpec {
    /// Base-domain sizes after class expansion. Each class keeps its rounded
    /// total: the first `r` domains receive one extra unit.
    pub fn base_sizes(&self) -> Result<Vec<usize>> {
        let sizes = match &self.base.sizes {
            DomainSizes::Explicit(v) => v.clone(),
            DomainSizes::Classes(classes) => {
                let mut out = Vec::new();
                for c in classes {
                    if c.count == 0 || !(c.average >= 1.0) {
                        return Err(Error::InvalidSpec(format!(
                            "size class needs count >= 1 and average >= 1, got {c:?}"
                        )));
                    }
                    let total = (c.count as f64 * c.average).round() as usize;
                    let base = total / c.count;
                    let extra = total - base * c.count;
                    out.extend((0..c.count).map(|k| base + usize::from(k < extra)));
                }
                out
            }
        };
        if sizes.is_empty() || sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec("every domain needs N_d >= 1".into()));
        }
        Ok(sizes)
    }

    fn class_of(&self) -> Option<Vec<usize>> {
        match &self.base.sizes {
            DomainSizes::Classes(classes) => Some(
                classes
                    .iter()
                    .enumerate()
                    .flat_map(|(c, cl)| std::iter::repeat(c).take(cl.count))
                    .collect(),
            ),
            DomainSizes::Explicit(_) => None,
        }
    }

    /// Aggregate index of each base domain, per aggregation.
    pub fn assignments(&self) -> Result<Vec<Vec<usize>>> {
        let dim = self.base_sizes()?.len();
        let mut out = Vec::with_capacity(self.aggregations.len());
        for agg in &self.aggregations {
            let a = match &agg.assignment {
                Assignment::Explicit(v) => v.clone(),
                Assignment::ClassCounts(counts) => {
                    let class_of = self.class_of().ok_or_else(|| {
                        Error::InvalidSpec(format!(
                            "aggregation `{}` uses class counts without size classes",
                            agg.name
                        ))
                    })?;
                    let DomainSizes::Classes(classes) = &self.base.sizes else { unreachable!() };
                    if counts.len() != agg.labels.len() || counts.iter().any(|c| c.len() != classes.len()) {
                        return Err(Error::InvalidSpec(format!(
                            "aggregation `{}`: class counts must be labels x classes",
                            agg.name
                        )));
                    }
                    for (c, cl) in classes.iter().enumerate() {
                        let s: usize = counts.iter().map(|row| row[c]).sum();
                        if s != cl.count {
                            return Err(Error::InvalidSpec(format!(
                                "aggregation `{}`: class {c} assigns {s} of {} domains",
                                agg.name, cl.count
                            )));
                        }
                    }
                    let mut taken = vec![0usize; classes.len()];
                    let mut result = vec![0usize; dim];
                    for (d, &c) in class_of.iter().enumerate() {
                        let mut k = 0;
                        let mut acc = counts[0][c];
                        while taken[c] >= acc {
                            k += 1;
                            acc += counts[k][c];
                        }
                        taken[c] += 1;
                        result[d] = k;
                    }
                    result
                }
            };
            if a.len() != dim || a.iter().any(|&k| k >= agg.labels.len()) {
                return Err(Error::InvalidSpec(format!(
                    "aggregation `{}` must map each of the {dim} base domains to one of {} labels",
                    agg.name,
                    agg.labels.len()
                )));
            }
            out.push(a);
        }
        Ok(out)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        if self.covariates.is_empty() && matches!(self.model, PopulationModel::RandomMean { .. }) {
            return Vec::new();
        }
        let mut names = vec!["intercept".to_string()];
        for c in &self.covariates {
            names.extend((1..c.probabilities.len()).map(|l| format!("{}_{}", c.name, l + 1)));
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        self.model.check()?;
        if !(self.cost > 0.0) {
            return Err(Error::InvalidSpec(format!("cost {} must be positive", self.cost)));
        }
        if self.cluster_size == Some(0) {
            return Err(Error::InvalidSpec("cluster size must be positive".into()));
        }
        for c in &self.covariates {
            if c.probabilities.len() < 2 || c.probabilities.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidSpec(format!("covariate `{}` needs >= 2 levels", c.name)));
            }
        }
        if let PopulationModel::Lmm { beta, .. } = &self.model {
            let k = self.covariate_names().len();
            if beta.len() != k {
                return Err(Error::InvalidSpec(format!("beta has {} entries, expected {k}", beta.len())));
            }
        }
        self.assignments()?;
        Ok(())
    }

    pub fn domain_structure(&self) -> Result<DomainStructure> {
        let dim = self.base_sizes()?.len();
        let width = dim.to_string().len();
        let mut parts = vec![(
            self.base.name.clone(),
            (1..=dim).map(|k| format!("{}{:0width$}", self.base.prefix, k)).collect(),
        )];
        for agg in &self.aggregations {
            parts.push((agg.name.clone(), agg.labels.clone()));
        }
        DomainStructure::new(parts)
    }
}

/// Expands `spec` into a frame and draws one realization of the model.
/// Deterministic in `spec.seed`.
pub fn generate_population(spec: &SyntheticSpec) -> Result<Population> {
    spec.validate()?;
    let sizes = spec.base_sizes()?;
    let assignments = spec.assignments()?;
    let domains = spec.domain_structure()?;
    let dim = sizes.len();
    let agg_offsets: Vec<usize> = domains.partitions()[1..].iter().map(|p| p.domains[0]).collect();

    let mut cov_rng = rng::stream(spec.seed, 1);
    let samplers = spec
        .covariates
        .iter()
        .map(|c| {
            WeightedIndex::new(&c.probabilities)
                .map_err(|e| Error::InvalidSpec(format!("covariate `{}`: {e}", c.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_cov = spec.covariate_names().len();

    let total: usize = sizes.iter().sum();
    let id_width = total.to_string().len();
    let mut units = Vec::with_capacity(total);
    let mut base_domain = Vec::with_capacity(total);
    for (d, &size) in sizes.iter().enumerate() {
        let label = domains.label(d).to_string();
        for k in 0..size {
            let mut memberships = vec![d];
            for (a, assign) in assignments.iter().enumerate() {
                memberships.push(agg_offsets[a] + assign[d]);
            }
            let mut covariates = Vec::with_capacity(n_cov);
            if n_cov > 0 {
                covariates.push(1.0);
                for (c, s) in spec.covariates.iter().zip(&samplers) {
                    let level = s.sample(&mut cov_rng);
                    covariates.extend((1..c.probabilities.len()).map(|l| f64::from(u8::from(l == level))));
                }
            }
            units.push(Unit {
                id: format!("u{:0id_width$}", units.len() + 1),
                stratum: label.clone(),
                memberships,
                membership_probs: Vec::new(),
                cost: spec.cost,
                cluster: spec.cluster_size.map(|c| format!("{label}-c{}", k / c + 1)),
                covariates,
                weight: 1.0,
            });
            base_domain.push(d);
        }
    }
    let frame = UnitFrame::new(domains, units, spec.covariate_names())?;

    let factor = spec.model.effect_factor(dim)?;
    let mut eff_rng = rng::stream(spec.seed, 2);
    let u = spec.model.draw_effects(factor.as_ref(), dim, &mut eff_rng);
    let mut err_rng = rng::stream(spec.seed, 3);
    let sd = spec.model.sigma2().sqrt();
    let y = frame
        .units()
        .iter()
        .zip(&base_domain)
        .map(|(unit, &d)| {
            let e: f64 = err_rng.sample(StandardNormal);
            spec.model.fixed_part(&unit.covariates) + u[d] + sd * unit.weight.sqrt() * e
        })
        .collect();
    Ok(Population {
        frame,
        spec: spec.clone(),
        base_domain,
        y,
        u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sigma2: f64, sigma2_u: f64) -> SyntheticSpec {
        SyntheticSpec {
            seed: 7,
            base: BasePartition {
                name: "A".into(),
                prefix: "a".into(),
                sizes: DomainSizes::Explicit(vec![5, 8, 3]),
            },
            aggregations: vec![Aggregation {
                name: "B".into(),
                labels: vec!["b1".into(), "b2".into()],
                assignment: Assignment::Explicit(vec![0, 1, 0]),
            }],
            model: PopulationModel::RandomMean { mu: 0.28, sigma2, sigma2_u },
            cost: 1.0,
            cluster_size: None,
            covariates: vec![],
        }
    }

    #[test]
    fn degenerate_variances_give_constant_values() {
        let pop = generate_population(&small(0.0, 0.0)).unwrap();
        assert!(pop.y.iter().all(|&y| y == 0.28));
        let totals = pop.domain_totals();
        let counts = pop.frame.domain_counts();
        for (t, n) in totals.iter().zip(counts) {
            assert!((t - 0.28 * n).abs() < 1e-12);
        }
        assert_eq!(counts_b(&pop), vec![8.0, 8.0]);
    }

    fn counts_b(pop: &Population) -> Vec<f64> {
        pop.frame.domain_counts()[3..].to_vec()
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_population(&small(0.1958, 0.0005)).unwrap();
        let b = generate_population(&small(0.1958, 0.0005)).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.y, b.y);
        let mut other = small(0.1958, 0.0005);
        other.seed = 8;
        assert_ne!(generate_population(&other).unwrap().y, a.y);
    }

    #[test]
    fn class_expansion_keeps_rounded_totals() {
        let mut spec = small(0.1, 0.0);
        spec.base.sizes = DomainSizes::Classes(vec![
            SizeClass { count: 12, average: 801.17 },
            SizeClass { count: 13, average: 9924.54 },
        ]);
        spec.aggregations[0].assignment = Assignment::ClassCounts(vec![vec![7, 1], vec![5, 12]]);
        let sizes = spec.base_sizes().unwrap();
        assert_eq!(sizes[..12].iter().sum::<usize>(), 9614);
        assert_eq!(sizes[12..].iter().sum::<usize>(), 129_019);
        let assign = spec.assignments().unwrap().remove(0);
        assert_eq!(assign.iter().filter(|&&k| k == 0).count(), 8);
        assert_eq!(assign[..7], [0; 7]);
        assert_eq!(assign[12], 0);
        assert_eq!(assign[13], 1);
    }

    #[test]
    fn lmm_covariates_are_dummy_coded() {
        let mut spec = small(0.1, 0.01);
        spec.covariates = vec![CategoricalCovariate {
            name: "edu".into(),
            probabilities: vec![0.5, 0.3, 0.2],
        }];
        spec.model = PopulationModel::Lmm {
            beta: vec![1.0, 0.5, -0.5],
            sigma2: 0.1,
            sigma2_u: 0.01,
            omega: OmegaSpec::ar1(0.4),
        };
        let pop = generate_population(&spec).unwrap();
        assert_eq!(pop.frame.covariate_names(), &["intercept", "edu_2", "edu_3"]);
        for u in pop.frame.units() {
            assert_eq!(u.covariates[0], 1.0);
            assert!(u.covariates[1] + u.covariates[2] <= 1.0);
        }
        spec.model = PopulationModel::Lmm {
            beta: vec![1.0],
            sigma2: 0.1,
            sigma2_u: 0.01,
            omega: OmegaSpec::anova(),
        };
        assert!(generate_population(&spec).is_err());
    }

    #[test]
    fn domain_effect_variance_matches_model() {
        let spec = small(0.1958, 0.0005);
        let mut rng = rng::stream(99, 0);
        let reps = 10_000;
        let draws: Vec<f64> = (0..reps)
            .flat_map(|_| spec.model.draw_effects(None, 1, &mut rng))
            .collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((var / 0.0005 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn clusters_are_consecutive_blocks() {
        let mut spec = small(0.1, 0.0);
        spec.cluster_size = Some(3);
        let pop = generate_population(&spec).unwrap();
        let first: Vec<&str> = pop.frame.units()[..5]
            .iter()
            .map(|u| u.cluster.as_deref().unwrap())
            .collect();
        assert_eq!(first, ["a1-c1", "a1-c1", "a1-c1", "a1-c2", "a1-c2"]);
    }
}
