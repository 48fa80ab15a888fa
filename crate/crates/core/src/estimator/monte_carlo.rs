//! Model-based Monte Carlo check of the analytic MSE.
//!
//! The sample is drawn once. Each replicate regenerates `u` and the errors
//! from the population model, predicts the base-domain totals and records
//! the prediction error. Errors of the nonsampled units only enter through
//! their domain sum, drawn directly as `N(0, sigma2 sum_{i in r} w_i)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LmmDesign, LmmPredictor};
use crate::allocate::AllocationResult;
use crate::error::{Error, Result};
use crate::frame::{generate_population, SyntheticSpec};
use crate::mse::{self, omega_matrix, G1Mode, G2Form, VarianceComponents};
use crate::rng::stream;
use crate::sampler::{self, CubeOptions};

/// Replicate streams start here, clear of the sample's stream 0.
const STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Seed of the fixed sample; defaults to `seed`.
    #[serde(default)]
    pub sample_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEntry {
    pub domain: String,
    pub big_n: f64,
    pub n: f64,
    /// No sampled units: predicted synthetically with `u = 0`.
    pub synthetic: bool,
    /// Empirical MSE against the model total `y+_ds + x+_dr' beta + N_dr u_d`.
    pub mse: f64,
    pub mse_se: f64,
    pub bias: f64,
    /// Empirical MSE against the realized total, which adds the
    /// nonsampled errors.
    pub mse_finite: f64,
    /// `sigma2 N_dr^2 t*_dd`.
    pub g1: f64,
    /// GLS form, `sigma2 r' M_XX(omega)^-1 r`.
    pub g2: f64,
    /// `sigma2 sum_{i in r} w_i`, the extra variance of the realized total.
    pub finite_term: f64,
    /// `mse / (g1 + g2)`.
    pub ratio: Option<f64>,
    pub ratio_finite: Option<f64>,
    /// Random-mean `N_d^2` lead with the printed `g2`, where defined.
    pub g1_approx: Option<f64>,
    pub g2_printed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub replicates: usize,
    pub seed: u64,
    pub sample_seed: u64,
    pub partition: String,
    pub sample_size: usize,
    pub entries: Vec<McEntry>,
}

impl McReport {
    /// Entries with at least `min_n` sampled units.
    pub fn eligible(&self, min_n: f64) -> impl Iterator<Item = &McEntry> {
        self.entries.iter().filter(move |e| e.n >= min_n)
    }
}

/// Runs the simulation on the base partition of `spec`, where the
/// generating model and the analysis model coincide.
pub fn monte_carlo_mse(spec: &SyntheticSpec, allocation: &AllocationResult, config: &McConfig) -> Result<McReport> {
    if config.replicates < 2 {
        return Err(Error::InvalidProblem("at least two replicates are needed".into()));
    }
    let pop = generate_population(spec)?;
    let frame = &pop.frame;
    let sample_seed = config.sample_seed.unwrap_or(config.seed);
    let draw = sampler::select(frame, allocation, sample_seed, CubeOptions::default())?;
    let indices = draw.indices();
    let design = LmmDesign::from_frame(frame, 0, &indices)?;
    let dim = design.dim();
    let model = &spec.model;

    let degenerate = model.sigma2() == 0.0;
    if degenerate && model.sigma2_u() > 0.0 {
        return Err(Error::InvalidSpec("sigma2 = 0 with sigma2_u > 0 has no mixed-model analysis".into()));
    }
    // With no variance at all the data are the fixed part exactly, and any
    // positive weights recover it; unit components keep the algebra defined.
    let vc = if degenerate {
        VarianceComponents::new(1.0, 0.0)?
    } else {
        model.components()?
    };
    let omega = omega_matrix(&vc.omega, &vc, dim)?;
    let predictor = LmmPredictor::new(&design, &omega, &vc)?;
    let factor = model.effect_factor(dim)?;

    let sample_fixed: Vec<f64> = indices.iter().map(|&i| model.fixed_part(&frame.units()[i].covariates)).collect();
    let sample_sd: Vec<f64> = indices
        .iter()
        .map(|&i| model.sigma2().sqrt() * frame.units()[i].weight.sqrt())
        .collect();
    let mut sampled = vec![false; frame.len()];
    for &i in &indices {
        sampled[i] = true;
    }
    let mut rest_fixed = vec![0.0; dim];
    let mut rest_w = vec![0.0; dim];
    for (i, unit) in frame.units().iter().enumerate() {
        if !sampled[i] {
            let d = pop.base_domain[i];
            rest_fixed[d] += model.fixed_part(&unit.covariates);
            rest_w[d] += unit.weight;
        }
    }

    let replicate = |r: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream(config.seed, STREAM_OFFSET + r as u64);
        let u = model.draw_effects(factor.as_ref(), dim, &mut rng);
        let y: Vec<f64> = design
            .domain
            .iter()
            .zip(&sample_fixed)
            .zip(&sample_sd)
            .map(|((&d, f), sd)| f + u[d] + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (_, _, pred) = predictor.predict(&y)?;
        let mut y_ds = vec![0.0; dim];
        for (&d, v) in design.domain.iter().zip(&y) {
            y_ds[d] += v;
        }
        let mut err = Vec::with_capacity(dim);
        let mut err_finite = Vec::with_capacity(dim);
        for d in 0..dim {
            let target = y_ds[d] + rest_fixed[d] + design.n_dr[d] * u[d];
            let e_rest = (model.sigma2() * rest_w[d]).sqrt() * rng.sample::<f64, _>(StandardNormal);
            err.push(pred[d] - target);
            err_finite.push(pred[d] - target - e_rest);
        }
        Ok((err, err_finite))
    };
    let errors: Vec<(Vec<f64>, Vec<f64>)> = (0..config.replicates)
        .into_par_iter()
        .map(replicate)
        .collect::<Result<_>>()?;

    let reps = config.replicates as f64;
    let counts = design.counts();
    let n_total: f64 = counts.iter().sum();
    let shrink: Vec<(f64, f64)> = counts.iter().map(|&n| (n, mse::gamma(n, &vc))).collect();
    let part = &frame.domains().partitions()[0];
    let scale = if degenerate { 0.0 } else { 1.0 };
    let entries = (0..dim)
        .map(|d| {
            let sq: Vec<f64> = errors.iter().map(|e| e.0[d] * e.0[d]).collect();
            let mse_model = sq.iter().sum::<f64>() / reps;
            let var_sq = sq.iter().map(|s| (s - mse_model).powi(2)).sum::<f64>() / (reps - 1.0);
            let bias = errors.iter().map(|e| e.0[d]).sum::<f64>() / reps;
            let mse_finite = errors.iter().map(|e| e.1[d] * e.1[d]).sum::<f64>() / reps;
            let big_n = counts[d] + design.n_dr[d];
            let g1 = scale * predictor.g1()[d];
            let g2 = scale * predictor.g2()[d];
            let finite_term = model.sigma2() * rest_w[d];
            let ratio = |m: f64, a: f64| (a > 0.0).then(|| m / a);
            let random_mean = matches!(model, crate::frame::synthetic::PopulationModel::RandomMean { .. });
            let (g1_approx, g2_printed) = if random_mean && !degenerate && counts[d] > 0.0 {
                (
                    mse::g1_random_mean(big_n, counts[d], &vc, G1Mode::Approx).ok(),
                    mse::g2_random_mean(big_n, counts[d], n_total, &shrink, &vc, G2Form::AsPrinted).ok(),
                )
            } else {
                (None, None)
            };
            McEntry {
                domain: frame.domains().qualified_name(part.domains[d]),
                big_n,
                n: counts[d],
                synthetic: counts[d] == 0.0,
                mse: mse_model,
                mse_se: (var_sq / reps).sqrt(),
                bias,
                mse_finite,
                g1,
                g2,
                finite_term,
                ratio: ratio(mse_model, g1 + g2),
                ratio_finite: ratio(mse_finite, g1 + g2 + finite_term),
                g1_approx,
                g2_printed,
            }
        })
        .collect();
    Ok(McReport {
        replicates: config.replicates,
        seed: config.seed,
        sample_seed,
        partition: part.name.clone(),
        sample_size: indices.len(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocate::{DesignMode, DesignProblem, ProblemSpec, VariableSpec};
    use crate::frame::synthetic::{BasePartition, DomainSizes, PopulationModel};

    fn spec(model: PopulationModel) -> SyntheticSpec {
        SyntheticSpec {
            seed: 11,
            base: BasePartition {
                name: "area".into(),
                prefix: "a".into(),
                sizes: DomainSizes::Explicit(vec![300, 400, 500]),
            },
            aggregations: vec![],
            model,
            cost: 1.0,
            cluster_size: None,
            covariates: vec![],
        }
    }

    fn allocation(s: &SyntheticSpec) -> AllocationResult {
        let pop = generate_population(s).unwrap();
        let ps = ProblemSpec {
            mode: DesignMode::Stratified,
            variables: vec![VariableSpec {
                name: "y".into(),
                sigma2: s.model.sigma2().max(1.0),
                sigma2_u: s.model.sigma2_u(),
                omega: Default::default(),
            }],
            targets: vec![],
            two_stage: None,
            options: Default::default(),
        };
        let p = DesignProblem::from_frame(&pop.frame, &ps).unwrap();
        p.proportional(120.0).unwrap()
    }

    #[test]
    fn ratio_near_one() {
        let s = spec(PopulationModel::RandomMean {
            mu: 1.0,
            sigma2: 1.0,
            sigma2_u: 0.05,
        });
        let a = allocation(&s);
        let r = monte_carlo_mse(&s, &a, &McConfig { replicates: 4000, seed: 5, sample_seed: None }).unwrap();
        for e in &r.entries {
            assert_eq!(e.n, e.big_n / 10.0);
            let ratio = e.ratio.unwrap();
            assert!((ratio - 1.0).abs() < 5.0 * e.mse_se / (e.g1 + e.g2), "{e:?}");
        }
    }

    #[test]
    fn no_variance_no_error() {
        let s = spec(PopulationModel::RandomMean {
            mu: 2.0,
            sigma2: 0.0,
            sigma2_u: 0.0,
        });
        let a = allocation(&s);
        let r = monte_carlo_mse(&s, &a, &McConfig { replicates: 10, seed: 1, sample_seed: None }).unwrap();
        for e in &r.entries {
            assert!(e.mse < 1e-18 && e.g1 == 0.0 && e.ratio.is_none());
        }
    }

    #[test]
    fn replicates_are_reproducible() {
        let s = spec(PopulationModel::RandomMean {
            mu: 1.0,
            sigma2: 1.0,
            sigma2_u: 0.05,
        });
        let a = allocation(&s);
        let c = McConfig { replicates: 50, seed: 9, sample_seed: Some(3) };
        assert_eq!(monte_carlo_mse(&s, &a, &c).unwrap(), monte_carlo_mse(&s, &a, &c).unwrap());
    }

    #[test]
    fn unsampled_domain_is_flagged() {
        let s = spec(PopulationModel::RandomMean {
            mu: 1.0,
            sigma2: 1.0,
            sigma2_u: 0.05,
        });
        let mut a = allocation(&s);
        a.cells[0].n = 0.0;
        a.cells[0].pi = 0.0;
        let r = monte_carlo_mse(&s, &a, &McConfig { replicates: 2000, seed: 2, sample_seed: None }).unwrap();
        let e = &r.entries[0];
        assert!(e.synthetic && e.n == 0.0);
        assert!(!r.entries[1].synthetic);
        // N^2 sigma2_u plus the error of N mu-hat
        assert!((e.ratio.unwrap() - 1.0).abs() < 5.0 * e.mse_se / (e.g1 + e.g2), "{e:?}");
    }
}
