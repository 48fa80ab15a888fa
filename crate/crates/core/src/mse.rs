//! MSE components of the domain-total BLUP.
//!
//! Random-mean model: `y_i = mu + u_d + e_i` with `V(u_d) = sigma2_u`,
//! `V(e_i) = sigma2`. General unit-level model: `u ~ N(0, sigma2 * Omega)`
//! with `Omega = phi * Omega(rho)` and `phi = sigma2_u / sigma2`, so that the
//! ANOVA structure gives back the random-mean model.
//!
//! Domain sample sizes are reals throughout: strata sizes may be fractional.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2: f64,
    pub sigma2_u: f64,
    #[serde(default)]
    pub omega: OmegaSpec,
}

impl VarianceComponents {
    pub fn new(sigma2: f64, sigma2_u: f64) -> Result<Self> {
        let vc = VarianceComponents {
            sigma2,
            sigma2_u,
            omega: OmegaSpec::default(),
        };
        vc.validate()?;
        Ok(vc)
    }

    pub fn with_omega(mut self, omega: OmegaSpec) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidVariance(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        if !(self.sigma2_u >= 0.0) || !self.sigma2_u.is_finite() {
            return Err(Error::InvalidVariance(format!(
                "sigma2_u = {} must be nonnegative",
                self.sigma2_u
            )));
        }
        self.omega.validate()
    }

    pub fn phi(&self) -> f64 {
        self.sigma2_u / self.sigma2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKind {
    #[default]
    Anova,
    Ar1,
    Spatial,
}

/// Normalization of the AR(1) structure. `Printed` uses `(1 - rho)^-1`,
/// `Stationary` the usual `(1 - rho^2)^-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ar1Variant {
    #[default]
    Printed,
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OmegaSpec {
    #[serde(default)]
    pub kind: OmegaKind,
    #[serde(default)]
    pub rho: f64,
    /// Symmetric domain distances `s(d, d')`, spatial structure only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub ar1_variant: Ar1Variant,
    /// Partitions the structure applies to; others use ANOVA. Empty means
    /// every partition.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<String>,
}

impl OmegaSpec {
    pub fn anova() -> Self {
        OmegaSpec::default()
    }

    pub fn ar1(rho: f64) -> Self {
        OmegaSpec {
            kind: OmegaKind::Ar1,
            rho,
            ..Default::default()
        }
    }

    pub fn spatial(rho: f64, distance: Vec<Vec<f64>>) -> Self {
        OmegaSpec {
            kind: OmegaKind::Spatial,
            rho,
            distance: Some(distance),
            ..Default::default()
        }
    }

    pub fn applies_to(&self, partition: &str) -> bool {
        self.partitions.is_empty() || self.partitions.iter().any(|p| p == partition)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            OmegaKind::Anova => Ok(()),
            OmegaKind::Ar1 => {
                if self.rho.abs() < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidRho(self.rho))
                }
            }
            OmegaKind::Spatial => {
                if !(self.rho > 0.0) {
                    return Err(Error::InvalidRho(self.rho));
                }
                let s = self
                    .distance
                    .as_ref()
                    .ok_or_else(|| Error::InvalidVariance("spatial structure needs a distance matrix".into()))?;
                let n = s.len();
                for (i, row) in s.iter().enumerate() {
                    if row.len() != n {
                        return Err(Error::InvalidVariance("distance matrix is not square".into()));
                    }
                    if row[i] != 0.0 {
                        return Err(Error::InvalidVariance(format!("distance s({i},{i}) must be 0")));
                    }
                    for (j, &v) in row.iter().enumerate() {
                        if !(v >= 0.0) || v != s[j][i] {
                            return Err(Error::InvalidVariance(format!(
                                "distance s({i},{j}) must be nonnegative and symmetric"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// The correlation structure `Omega(rho)` before the `phi` factor.
    pub fn unscaled(&self, dim: usize) -> Result<DMatrix<f64>> {
        self.validate()?;
        let m = match self.kind {
            OmegaKind::Anova => DMatrix::identity(dim, dim),
            OmegaKind::Ar1 => {
                let norm = match self.ar1_variant {
                    Ar1Variant::Printed => 1.0 - self.rho,
                    Ar1Variant::Stationary => 1.0 - self.rho * self.rho,
                };
                DMatrix::from_fn(dim, dim, |i, j| {
                    self.rho.powi((i as i32 - j as i32).abs()) / norm
                })
            }
            OmegaKind::Spatial => {
                let s = self.distance.as_ref().expect("validated");
                if s.len() != dim {
                    return Err(Error::InvalidVariance(format!(
                        "distance matrix has order {}, expected {dim}",
                        s.len()
                    )));
                }
                DMatrix::from_fn(dim, dim, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    1.0 / (1.0 + delta + (s[i][j] / self.rho).exp())
                })
            }
        };
        Ok(m)
    }
}

/// `Omega = phi * Omega(rho)`, verified symmetric positive definite.
pub fn omega_matrix(spec: &OmegaSpec, vc: &VarianceComponents, dim: usize) -> Result<DMatrix<f64>> {
    let m = spec.unscaled(dim)? * vc.phi();
    if vc.sigma2_u == 0.0 {
        return Ok(m);
    }
    if !linalg::is_symmetric(&m, 1e-12) {
        return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
    }
    if m.clone().cholesky().is_none() {
        let eig = m.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::NotPositiveDefinite(format!(
            "{:?} structure with rho = {}: smallest eigenvalue {min:e}",
            spec.kind, spec.rho
        )));
    }
    Ok(m)
}

/// `T* = [diag(n) + Omega^-1]^-1`, computed as `Omega (I + diag(n) Omega)^-1`
/// so that a zero `Omega` is allowed.
pub fn t_star(n: &[f64], omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = n.len();
    if omega.nrows() != dim || omega.ncols() != dim || !linalg::is_symmetric(omega, 1e-10) {
        return Err(Error::SingularOmega);
    }
    let mut a = DMatrix::identity(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            a[(i, j)] += n[i] * omega[(i, j)];
        }
    }
    // (I + N Omega)^T = I + Omega N, so Omega (I + N Omega)^-1 = [(I + Omega N)^-1 Omega]^T.
    let lu = a.transpose().lu();
    let mut t = lu.solve(omega).ok_or(Error::SingularOmega)?.transpose();
    linalg::symmetrize(&mut t);
    Ok(t)
}

/// `Gamma = diag(n) [diag(n) + Omega^-1]^-1`.
pub fn gamma_matrix(n: &[f64], omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if n.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidProblem("domain sizes must be nonnegative".into()));
    }
    let mut g = t_star(n, omega)?;
    for (i, &ni) in n.iter().enumerate() {
        g.row_mut(i).scale_mut(ni);
    }
    Ok(g)
}

/// Shrinkage factor `gamma = sigma2_u / (sigma2 / n + sigma2_u)`, zero at `n = 0`.
pub fn gamma(n: f64, vc: &VarianceComponents) -> f64 {
    if n <= 0.0 || vc.sigma2_u == 0.0 {
        return 0.0;
    }
    vc.sigma2_u * n / (vc.sigma2 + n * vc.sigma2_u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G1Mode {
    /// `N_d^2` in place of `(N_d - n_d)^2`, negligible sampling fractions.
    #[default]
    Approx,
    Exact,
}

pub fn g1_random_mean(big_n: f64, n: f64, vc: &VarianceComponents, mode: G1Mode) -> Result<f64> {
    if n > big_n * (1.0 + 1e-12) {
        return Err(Error::DomainOversample { n, big_n });
    }
    if n < 0.0 {
        return Err(Error::InvalidProblem(format!("negative domain sample size {n}")));
    }
    let lead = match mode {
        G1Mode::Approx => big_n * big_n,
        G1Mode::Exact => (big_n - n).max(0.0).powi(2),
    };
    Ok(lead * vc.sigma2_u * vc.sigma2 / (n * vc.sigma2_u + vc.sigma2))
}

/// Second-order term of the random-mean MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G2Form {
    /// `(N_d - n_d)^2 (sigma2/n) (1 - gamma_d)^2 (1 - n^-1 sum n_k gamma_k)`.
    #[default]
    AsPrinted,
    /// Divides by `(1 - n^-1 sum n_k gamma_k)` instead, which is the exact
    /// variance of the GLS estimator of `mu`.
    Gls,
}

/// `partition` lists `(n_k, gamma_k)` for every domain of the partition
/// containing `d`; the `n_k` must add up to `n_total`.
pub fn g2_random_mean(
    big_n: f64,
    n_d: f64,
    n_total: f64,
    partition: &[(f64, f64)],
    vc: &VarianceComponents,
    form: G2Form,
) -> Result<f64> {
    if n_d > big_n * (1.0 + 1e-12) {
        return Err(Error::DomainOversample { n: n_d, big_n });
    }
    if !(n_total > 0.0) {
        return Err(Error::ZeroSample);
    }
    let sum: f64 = partition.iter().map(|p| p.0).sum();
    if (sum - n_total).abs() > 1e-9 * n_total.max(1.0) {
        return Err(Error::PartitionMismatch { sum, total: n_total });
    }
    let g = gamma(n_d, vc);
    let shrink: f64 = 1.0 - partition.iter().map(|&(nk, gk)| nk * gk).sum::<f64>() / n_total;
    let base = (big_n - n_d).max(0.0).powi(2) * vc.sigma2 / n_total * (1.0 - g).powi(2);
    Ok(match form {
        G2Form::AsPrinted => base * shrink,
        G2Form::Gls => base / shrink,
    })
}

/// `g1 = N_d^2 (sigma2 / n_d) gamma_d` with `gamma_d` the diagonal of `Gamma`.
pub fn g1_lmm(big_n: f64, n: f64, gamma_d: f64, vc: &VarianceComponents) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::ZeroSample);
    }
    Ok(big_n * big_n * vc.sigma2 / n * gamma_d)
}

/// `g2 = sigma2 * r' M_XX(omega)^-1 r` for the residual covariate vector
/// `r = x+_dr - N_dr sum_d' t*_dd' m_ZX[d']`.
///
/// `m_zx` holds the rows of `M_ZX` (weighted covariate sums per domain), so
/// with unit weights `m_ZX[d'] = n_d' xbar_d's` and the sum runs over
/// `gamma_d'd xbar_d's`.
pub fn g2_lmm(
    d: usize,
    x_dr: &DVector<f64>,
    n_dr: f64,
    t_star: &DMatrix<f64>,
    m_zx: &DMatrix<f64>,
    mxx_inv: &DMatrix<f64>,
    vc: &VarianceComponents,
) -> Result<f64> {
    let r = lmm_residual(d, x_dr, n_dr, t_star, m_zx);
    if mxx_inv.nrows() != r.len() || mxx_inv.ncols() != r.len() {
        return Err(Error::SingularMxx(f64::INFINITY));
    }
    Ok((vc.sigma2 * linalg::quad_form(&r, mxx_inv)).max(0.0))
}

pub(crate) fn lmm_residual(
    d: usize,
    x_dr: &DVector<f64>,
    n_dr: f64,
    t_star: &DMatrix<f64>,
    m_zx: &DMatrix<f64>,
) -> DVector<f64> {
    let mut r = x_dr.clone();
    for dp in 0..t_star.ncols() {
        let t = t_star[(d, dp)];
        if t != 0.0 {
            for g in 0..r.len() {
                r[g] -= n_dr * t * m_zx[(dp, g)];
            }
        }
    }
    r
}

/// Expected g1 when domain membership is known only through stratum-level
/// probabilities `phi_d[h]`; `strata` holds `(N_h, n_h, phi_d[h])`.
pub fn expected_g1_uncertain(strata: &[(f64, f64, f64)], vc: &VarianceComponents) -> Result<f64> {
    let mut big = 0.0;
    let mut small = 0.0;
    for &(nh_pop, nh, phi) in strata {
        if !(0.0..=1.0).contains(&phi) {
            return Err(Error::InvalidProbability {
                unit: "stratum".into(),
                value: phi,
            });
        }
        big += nh_pop * phi;
        small += nh * phi;
    }
    if big == 0.0 {
        return Err(Error::EmptyDomain);
    }
    Ok(big * big * vc.sigma2_u * vc.sigma2 / (small * vc.sigma2_u + vc.sigma2))
}

/// A per-domain precision threshold on g1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub g1_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_anchor: Option<f64>,
}

impl Threshold {
    pub fn absolute(g1_star: f64) -> Result<Self> {
        if !(g1_star > 0.0) {
            return Err(Error::InvalidProblem(format!("threshold g1* = {g1_star} must be positive")));
        }
        Ok(Threshold {
            g1_star,
            r_star: None,
            y_anchor: None,
        })
    }

    /// `g1* = (R* Y)^2` from a relative standard error target.
    pub fn relative(r_star: f64, y_anchor: f64) -> Result<Self> {
        if !(r_star > 0.0) || !(y_anchor > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "relative target R* = {r_star} with anchor Y = {y_anchor}"
            )));
        }
        Ok(Threshold {
            g1_star: (r_star * y_anchor).powi(2),
            r_star: Some(r_star),
            y_anchor: Some(y_anchor),
        })
    }

    /// `V* = g1* / N_d^2`.
    pub fn v_star(&self, big_n: f64) -> f64 {
        self.g1_star / (big_n * big_n)
    }
}

/// `R = sqrt(g1) / Y`.
pub fn realized_r(g1: f64, y_anchor: f64) -> f64 {
    g1.max(0.0).sqrt() / y_anchor
}

/// Thresholds of one variable, indexed by domain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionTargets {
    pub thresholds: Vec<Option<Threshold>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseEntry {
    pub domain: usize,
    pub name: String,
    pub big_n: f64,
    pub n: f64,
    pub gamma: f64,
    pub g1: f64,
    pub g2: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_anchor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rap: Option<f64>,
}

impl MseEntry {
    pub fn new(
        domain: usize,
        name: String,
        big_n: f64,
        n: f64,
        gamma: f64,
        g1: f64,
        g2: f64,
        threshold: Option<&Threshold>,
    ) -> Self {
        let y_anchor = threshold.and_then(|t| t.y_anchor);
        let r = y_anchor.map(|y| realized_r(g1, y));
        let r_star = threshold.and_then(|t| t.r_star);
        let rap = match (r, r_star) {
            (Some(r), Some(rs)) => Some(r / rs),
            _ => None,
        };
        MseEntry {
            domain,
            name,
            big_n,
            n,
            gamma,
            g1,
            g2,
            total: g1 + g2,
            g1_star: threshold.map(|t| t.g1_star),
            y_anchor,
            r,
            r_star,
            rap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub variable: String,
    pub entries: Vec<MseEntry>,
}
