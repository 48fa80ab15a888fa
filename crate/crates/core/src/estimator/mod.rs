//! BLUP predictors of domain totals and their Monte Carlo validation.
//!
//! Under `y = X beta + Z u + e` with `Var(e) = sigma2 W` and
//! `Var(u) = sigma2 Omega`, every cross-product is weighted by `W^-1`:
//! `M_AB = A' W^-1 B`. Then `T* = (M_ZZ + Omega^-1)^-1`,
//! `beta~ = M_XX(omega)^-1 m_Xy(omega)` with
//! `M_XX(omega) = M_XX - M_XZ T* M_ZX`, and `u~ = T*(m_Zy - M_ZX beta~)`.

mod monte_carlo;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use monte_carlo::{monte_carlo_mse, McConfig, McEntry, McReport};

use crate::error::{Error, Result};
use crate::frame::UnitFrame;
use crate::linalg;
use crate::mse::{self, VarianceComponents};

/// Largest condition number accepted for `M_XX(omega)`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMeanFit {
    pub mu: f64,
    pub u: Vec<f64>,
    pub gamma: Vec<f64>,
    pub totals: Vec<f64>,
    /// Domains without sample units, predicted synthetically with `u = 0`.
    pub synthetic: Vec<bool>,
}

/// BLUP of the domain totals under `y = mu + u_d + e`.
///
/// `domain[i]` is the domain of sampled value `y[i]`; `big_n` holds the
/// population sizes of the `D` domains of the partition.
pub fn blup_random_mean(y: &[f64], domain: &[usize], big_n: &[f64], vc: &VarianceComponents) -> Result<RandomMeanFit> {
    if y.is_empty() {
        return Err(Error::EmptySample);
    }
    if y.len() != domain.len() || domain.iter().any(|&d| d >= big_n.len()) {
        return Err(Error::InvalidProblem("sample values and domains disagree".into()));
    }
    let dim = big_n.len();
    let mut n = vec![0.0; dim];
    let mut sum = vec![0.0; dim];
    for (&v, &d) in y.iter().zip(domain) {
        n[d] += 1.0;
        sum[d] += v;
    }
    // GLS weights of the domain means, n_d / (sigma2 + n_d sigma2_u).
    let (mut num, mut den) = (0.0, 0.0);
    for d in 0..dim {
        if n[d] > 0.0 {
            let w = n[d] / (vc.sigma2 + n[d] * vc.sigma2_u);
            num += w * sum[d] / n[d];
            den += w;
        }
    }
    let mu = num / den;
    let gamma: Vec<f64> = n.iter().map(|&nd| mse::gamma(nd, vc)).collect();
    let u: Vec<f64> = (0..dim)
        .map(|d| if n[d] > 0.0 { gamma[d] * (sum[d] / n[d] - mu) } else { 0.0 })
        .collect();
    let totals = (0..dim)
        .map(|d| sum[d] + (big_n[d] - n[d]).max(0.0) * (mu + u[d]))
        .collect();
    Ok(RandomMeanFit {
        mu,
        u,
        gamma,
        totals,
        synthetic: n.iter().map(|&v| v == 0.0).collect(),
    })
}

/// Sample-side design of a unit-level mixed model over one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmDesign {
    /// Sample covariates, one row per sampled unit.
    pub x: DMatrix<f64>,
    /// Domain of each sampled unit.
    pub domain: Vec<usize>,
    pub w: Vec<f64>,
    /// Covariate totals over the nonsampled units, `x+_dr`, one row per domain.
    pub x_dr: DMatrix<f64>,
    /// Nonsampled counts `N_dr`.
    pub n_dr: Vec<f64>,
}

impl LmmDesign {
    pub fn new(x: DMatrix<f64>, domain: Vec<usize>, w: Vec<f64>, x_dr: DMatrix<f64>, n_dr: Vec<f64>) -> Result<Self> {
        let dim = n_dr.len();
        if x.nrows() != domain.len() || w.len() != domain.len() {
            return Err(Error::InvalidProblem("design rows disagree".into()));
        }
        if x_dr.nrows() != dim || x_dr.ncols() != x.ncols() {
            return Err(Error::InvalidProblem("population aggregates have the wrong shape".into()));
        }
        if domain.iter().any(|&d| d >= dim) || w.iter().any(|&v| !(v > 0.0)) || n_dr.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidProblem("invalid domain index, weight or N_dr".into()));
        }
        if domain.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(LmmDesign { x, domain, w, x_dr, n_dr })
    }

    /// Design of the sampled `indices` on one partition of `frame`. Frames
    /// without covariates get an intercept.
    pub fn from_frame(frame: &UnitFrame, partition: usize, indices: &[usize]) -> Result<Self> {
        let part = frame
            .domains()
            .partitions()
            .get(partition)
            .ok_or_else(|| Error::UnknownDomain(format!("partition {partition}")))?;
        let local = |unit: &crate::frame::Unit| -> Result<usize> {
            unit.memberships
                .iter()
                .find_map(|d| part.domains.iter().position(|p| p == d))
                .ok_or_else(|| Error::MissingMembership {
                    unit: unit.id.clone(),
                    partition: part.name.clone(),
                })
        };
        let p = frame.covariate_names().len().max(1);
        let row = |unit: &crate::frame::Unit| -> Vec<f64> {
            if unit.covariates.is_empty() {
                vec![1.0]
            } else {
                unit.covariates.clone()
            }
        };
        let dim = part.domains.len();
        let mut sampled = vec![false; frame.len()];
        let mut x = DMatrix::zeros(indices.len(), p);
        let mut domain = Vec::with_capacity(indices.len());
        let mut w = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let u = &frame.units()[i];
            sampled[i] = true;
            for (c, v) in row(u).into_iter().enumerate() {
                x[(r, c)] = v;
            }
            domain.push(local(u)?);
            w.push(u.weight);
        }
        let mut x_dr = DMatrix::zeros(dim, p);
        let mut n_dr = vec![0.0; dim];
        for (i, u) in frame.units().iter().enumerate() {
            if sampled[i] {
                continue;
            }
            let d = local(u)?;
            n_dr[d] += 1.0;
            for (c, v) in row(u).into_iter().enumerate() {
                x_dr[(d, c)] += v;
            }
        }
        LmmDesign::new(x, domain, w, x_dr, n_dr)
    }

    pub fn dim(&self) -> usize {
        self.n_dr.len()
    }

    /// Sampled units per domain.
    pub fn counts(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.dim()];
        for &d in &self.domain {
            n[d] += 1.0;
        }
        n
    }

    /// Diagonal of `M_ZZ = Z' W^-1 Z`.
    pub fn m_zz(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (&d, &w) in self.domain.iter().zip(&self.w) {
            m[d] += 1.0 / w;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlupFit {
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub t_star: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub totals: Vec<f64>,
    /// `sigma2 N_dr^2 t*_dd`.
    pub g1: Vec<f64>,
    /// `sigma2 r' M_XX(omega)^-1 r`.
    pub g2: Vec<f64>,
    pub synthetic: Vec<bool>,
}

/// Everything in the BLUP that does not depend on `y`, so Monte Carlo
/// replicates on a fixed sample only pay for two matrix-vector products.
#[derive(Debug, Clone)]
pub struct LmmPredictor {
    design: LmmDesign,
    t_star: DMatrix<f64>,
    m_zx: DMatrix<f64>,
    mxx_inv: DMatrix<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl LmmPredictor {
    pub fn new(design: &LmmDesign, omega: &DMatrix<f64>, vc: &VarianceComponents) -> Result<Self> {
        let dim = design.dim();
        let p = design.x.ncols();
        if omega.nrows() != dim {
            return Err(Error::SingularOmega);
        }
        let mut m_zx = DMatrix::zeros(dim, p);
        let mut m_xx = DMatrix::zeros(p, p);
        for (r, (&d, &w)) in design.domain.iter().zip(&design.w).enumerate() {
            let row = design.x.row(r);
            for a in 0..p {
                m_zx[(d, a)] += row[a] / w;
                for b in 0..p {
                    m_xx[(a, b)] += row[a] * row[b] / w;
                }
            }
        }
        let t_star = mse::t_star(&design.m_zz(), omega)?;
        let mut mxx_omega = m_xx - m_zx.transpose() * &t_star * &m_zx;
        linalg::symmetrize(&mut mxx_omega);
        let mxx_inv = linalg::spd_inverse(&mxx_omega, MAX_CONDITION)?;
        let mut g1 = Vec::with_capacity(dim);
        let mut g2 = Vec::with_capacity(dim);
        for d in 0..dim {
            let n_dr = design.n_dr[d];
            g1.push(vc.sigma2 * n_dr * n_dr * t_star[(d, d)]);
            let x_dr = DVector::from_iterator(p, design.x_dr.row(d).iter().copied());
            g2.push(mse::g2_lmm(d, &x_dr, n_dr, &t_star, &m_zx, &mxx_inv, vc)?);
        }
        Ok(LmmPredictor {
            design: design.clone(),
            t_star,
            m_zx,
            mxx_inv,
            g1,
            g2,
        })
    }

    pub fn design(&self) -> &LmmDesign {
        &self.design
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn g2(&self) -> &[f64] {
        &self.g2
    }

    /// `(beta~, u~, totals)` for sample values `y`.
    pub fn predict(&self, y: &[f64]) -> Result<(DVector<f64>, DVector<f64>, Vec<f64>)> {
        let d = &self.design;
        if y.len() != d.domain.len() {
            return Err(Error::InvalidProblem("sample values and design disagree".into()));
        }
        let dim = d.dim();
        let p = d.x.ncols();
        let mut m_xy = DVector::zeros(p);
        let mut m_zy = DVector::zeros(dim);
        let mut y_ds = vec![0.0; dim];
        for (r, ((&dom, &w), &v)) in d.domain.iter().zip(&d.w).zip(y).enumerate() {
            for a in 0..p {
                m_xy[a] += d.x[(r, a)] * v / w;
            }
            m_zy[dom] += v / w;
            y_ds[dom] += v;
        }
        let tz = &self.t_star * &m_zy;
        let m_xy_omega = m_xy - self.m_zx.transpose() * tz;
        let beta = &self.mxx_inv * m_xy_omega;
        let u = &self.t_star * (m_zy - &self.m_zx * &beta);
        let totals = (0..dim)
            .map(|k| {
                let fixed: f64 = (0..p).map(|a| d.x_dr[(k, a)] * beta[a]).sum();
                y_ds[k] + fixed + d.n_dr[k] * u[k]
            })
            .collect();
        Ok((beta, u, totals))
    }

    pub fn fit(&self, y: &[f64]) -> Result<BlupFit> {
        let (beta, u, totals) = self.predict(y)?;
        let m_zz = self.design.m_zz();
        let mut gamma = self.t_star.clone();
        for (i, &m) in m_zz.iter().enumerate() {
            gamma.row_mut(i).scale_mut(m);
        }
        Ok(BlupFit {
            beta: beta.iter().copied().collect(),
            u: u.iter().copied().collect(),
            t_star: self.t_star.clone(),
            gamma,
            totals,
            g1: self.g1.clone(),
            g2: self.g2.clone(),
            synthetic: self.design.counts().iter().map(|&n| n == 0.0).collect(),
        })
    }
}

/// Fits the mixed model; `omega` is `Var(u) / sigma2`.
pub fn fit_lmm(design: &LmmDesign, y: &[f64], omega: &DMatrix<f64>, vc: &VarianceComponents) -> Result<BlupFit> {
    LmmPredictor::new(design, omega, vc)?.fit(y)
}

/// Domain totals `y+_ds + x+_dr' beta~ + N_dr u~_d` of a fit.
pub fn predict_totals(fit: &BlupFit, design: &LmmDesign, y: &[f64]) -> Result<Vec<f64>> {
    let dim = design.dim();
    let mut y_ds = vec![0.0; dim];
    for (&d, &v) in design.domain.iter().zip(y) {
        y_ds[d] += v;
    }
    Ok((0..dim)
        .map(|k| {
            let fixed: f64 = (0..design.x.ncols()).map(|a| design.x_dr[(k, a)] * fit.beta[a]).sum();
            y_ds[k] + fixed + design.n_dr[k] * fit.u[k]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mse::{omega_matrix, OmegaSpec};
    use crate::rng::stream;
    use rand::Rng;

    fn vc() -> VarianceComponents {
        VarianceComponents::new(0.1958, 0.0005).unwrap()
    }

    /// Dense GLS with `V = sigma2 (W + Z Omega Z')`, then the BLUP of `u`
    /// as `Omega Z' (W + Z Omega Z')^-1 (y - X beta)`.
    fn gls_oracle(design: &LmmDesign, y: &[f64], omega: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = y.len();
        let dim = design.dim();
        let mut z = DMatrix::zeros(n, dim);
        for (i, &d) in design.domain.iter().enumerate() {
            z[(i, d)] = 1.0;
        }
        let w = DMatrix::from_diagonal(&DVector::from_vec(design.w.clone()));
        let v = w + &z * omega * z.transpose();
        let vi = v.clone().try_inverse().unwrap();
        let x = &design.x;
        let yv = DVector::from_vec(y.to_vec());
        let beta = (x.transpose() * &vi * x).try_inverse().unwrap() * x.transpose() * &vi * &yv;
        let u = omega * z.transpose() * &vi * (yv - x * &beta);
        (beta, u)
    }

    fn random_design(seed: u64, dim: usize, p: usize, per: usize) -> (LmmDesign, Vec<f64>) {
        let mut rng = stream(seed, 0);
        let n = dim * per;
        let mut x = DMatrix::zeros(n, p);
        let mut domain = Vec::new();
        let mut w = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for c in 1..p {
                x[(i, c)] = rng.random::<f64>();
            }
            domain.push(i % dim);
            w.push(0.5 + rng.random::<f64>());
            y.push(rng.random::<f64>());
        }
        let x_dr = DMatrix::from_fn(dim, p, |_, c| if c == 0 { 10.0 } else { 5.0 });
        (LmmDesign::new(x, domain, w, x_dr, vec![10.0; dim]).unwrap(), y)
    }

    #[test]
    fn census_predicts_the_total() {
        let y = [1.0, 2.0, 3.0];
        let f = blup_random_mean(&y, &[0, 0, 1], &[2.0, 1.0], &vc()).unwrap();
        assert_eq!(f.totals, vec![3.0, 3.0]);
    }

    #[test]
    fn no_area_effect_is_synthetic() {
        let v = VarianceComponents::new(1.0, 0.0).unwrap();
        let f = blup_random_mean(&[1.0, 3.0], &[0, 1], &[10.0, 10.0], &v).unwrap();
        assert_eq!(f.u, vec![0.0, 0.0]);
        assert_eq!(f.mu, 2.0);
        assert_eq!(f.totals, vec![1.0 + 9.0 * 2.0, 3.0 + 9.0 * 2.0]);
    }

    #[test]
    fn random_mean_against_dense_gls() {
        let y = [0.3, 0.1, 0.5, 0.2, 0.9, 0.4];
        let dom = [0, 0, 1, 1, 2, 2];
        let v = VarianceComponents::new(0.2, 0.05).unwrap();
        let f = blup_random_mean(&y, &dom, &[10.0; 3], &v).unwrap();
        let design = LmmDesign::new(
            DMatrix::from_element(6, 1, 1.0),
            dom.to_vec(),
            vec![1.0; 6],
            DMatrix::from_element(3, 1, 8.0),
            vec![8.0; 3],
        )
        .unwrap();
        let omega = omega_matrix(&OmegaSpec::anova(), &v, 3).unwrap();
        let (beta, u) = gls_oracle(&design, &y, &omega);
        assert!((beta[0] - f.mu).abs() < 1e-10);
        for d in 0..3 {
            assert!((u[d] - f.u[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn lmm_matches_dense_gls() {
        let v = VarianceComponents::new(0.7, 0.3).unwrap();
        for seed in 0..5 {
            let (design, y) = random_design(seed, 3, 2, 4);
            let omega = omega_matrix(&OmegaSpec::ar1(0.4), &v, 3).unwrap();
            let fit = fit_lmm(&design, &y, &omega, &v).unwrap();
            let (beta, u) = gls_oracle(&design, &y, &omega);
            for a in 0..2 {
                assert!((fit.beta[a] - beta[a]).abs() <= 1e-8 * beta[a].abs().max(1.0));
            }
            for d in 0..3 {
                assert!((fit.u[d] - u[d]).abs() <= 1e-8 * u[d].abs().max(1.0));
            }
            assert_eq!(predict_totals(&fit, &design, &y).unwrap(), fit.totals);
        }
    }

    #[test]
    fn gamma_is_mzz_times_t_star() {
        let v = VarianceComponents::new(0.7, 0.3).unwrap();
        let (design, y) = random_design(7, 4, 2, 3);
        let omega = omega_matrix(&OmegaSpec::ar1(0.6), &v, 4).unwrap();
        let fit = fit_lmm(&design, &y, &omega, &v).unwrap();
        let gm = mse::gamma_matrix(&design.m_zz(), &omega).unwrap();
        assert!((fit.gamma - gm).amax() < 1e-12);
    }

    #[test]
    fn g2_matches_the_gls_covariance() {
        // Var(beta~) = sigma2 (X' V^-1 X)^-1 with V = W + Z Omega Z'
        let v = VarianceComponents::new(0.7, 0.3).unwrap();
        let (design, _) = random_design(3, 2, 2, 5);
        let omega = omega_matrix(&OmegaSpec::anova(), &v, 2).unwrap();
        let pred = LmmPredictor::new(&design, &omega, &v).unwrap();
        let n = design.domain.len();
        let mut z = DMatrix::zeros(n, 2);
        for (i, &d) in design.domain.iter().enumerate() {
            z[(i, d)] = 1.0;
        }
        let vmat = DMatrix::from_diagonal(&DVector::from_vec(design.w.clone())) + &z * &omega * z.transpose();
        let vi = vmat.try_inverse().unwrap();
        let cov = (design.x.transpose() * &vi * &design.x).try_inverse().unwrap() * v.sigma2;
        // d u~/d beta~ through y - X beta: r = x+_dr - N_dr (Omega Z' V^-1 X)_d
        let a = &omega * z.transpose() * &vi * &design.x;
        for d in 0..2 {
            let r = design.x_dr.row(d).transpose() - a.row(d).transpose() * design.n_dr[d];
            let g2 = (r.transpose() * &cov * &r)[(0, 0)];
            assert!((pred.g2()[d] / g2 - 1.0).abs() < 1e-8, "{} vs {g2}", pred.g2()[d]);
        }
    }

    #[test]
    fn unsampled_domain_falls_back() {
        let f = blup_random_mean(&[1.0, 2.0], &[0, 0], &[5.0, 5.0], &vc()).unwrap();
        assert!(f.synthetic[1] && !f.synthetic[0]);
        assert!((f.totals[1] - 5.0 * f.mu).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let (mut design, y) = random_design(1, 2, 2, 3);
        for r in 0..design.x.nrows() {
            design.x[(r, 1)] = 2.0;
        }
        let omega = omega_matrix(&OmegaSpec::anova(), &vc(), 2).unwrap();
        assert!(matches!(fit_lmm(&design, &y, &omega, &vc()), Err(Error::SingularSystem(_))));
    }
}
