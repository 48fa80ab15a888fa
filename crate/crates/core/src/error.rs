use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A (variable, domain) pair whose precision target cannot be met.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub variable: usize,
    pub domain: usize,
    pub domain_name: String,
    /// Expected sample size needed to reach the threshold.
    pub required: f64,
    /// Largest expected sample size the design can put in the domain.
    pub available: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    // frame
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate unit id `{0}`")]
    DuplicateUnit(String),
    #[error("unit `{unit}`: membership probability {value} outside [0, 1]")]
    InvalidProbability { unit: String, value: f64 },
    #[error("unit `{unit}`: cost {value} must be positive")]
    NonPositiveCost { unit: String, value: f64 },
    #[error("unit `{unit}`: weight {value} must be positive")]
    NonPositiveWeight { unit: String, value: f64 },
    #[error("unit `{unit}`: no membership in partition `{partition}`")]
    MissingMembership { unit: String, partition: String },
    #[error("unit `{unit}`: partition `{partition}` has both known and modeled membership")]
    MixedMembership { unit: String, partition: String },
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("stratum `{stratum}` straddles domains of partition `{partition}`")]
    HeterogeneousStratum { stratum: String, partition: String },
    #[error("invalid value in column `{column}` row {row}: `{value}`")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    // mse
    #[error("domain sample size {n} exceeds domain size {big_n}")]
    DomainOversample { n: f64, big_n: f64 },
    #[error("partition sizes sum to {sum}, expected total sample {total}")]
    PartitionMismatch { sum: f64, total: f64 },
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),
    #[error("invalid correlation parameter rho = {0}")]
    InvalidRho(f64),
    #[error("random-effect covariance is singular or not symmetric")]
    SingularOmega,
    #[error("domain sample size must be positive")]
    ZeroSample,
    #[error("M_XX(omega) is singular (condition number {0:e})")]
    SingularMxx(f64),
    #[error("domain has zero expected size")]
    EmptyDomain,
    #[error("invalid variance components: {0}")]
    InvalidVariance(String),

    // allocate
    #[error("domain `{}` needs {:.3} units but only {:.3} are available", .0.domain_name, .0.required, .0.available)]
    InfeasibleDomain(Violation),
    #[error("problem is infeasible for {} (variable, domain) pairs", .0.len())]
    Infeasible(Vec<Violation>),
    #[error("fixed-point iteration did not converge in {0} iterations")]
    MaxIterations(usize),
    #[error("fixed-point iteration diverging at iteration {0}")]
    DivergenceDetected(usize),
    #[error("invalid design problem: {0}")]
    InvalidProblem(String),
    #[error("linear program solver failed: {0}")]
    Solver(String),

    // sampler
    #[error("allocation inconsistent with frame: {0}")]
    InconsistentAllocation(String),
    #[error("degenerate balancing spec: {0}")]
    DegenerateSpec(String),
    #[error("stratum `{stratum}` size {value} is not an integer")]
    NonIntegerSize { stratum: String, value: f64 },
    #[error("cluster `{cluster}` has {size} units, fewer than the second-stage take {take}")]
    ClusterTooSmall {
        cluster: String,
        size: usize,
        take: usize,
    },

    // estimator
    #[error("sample is empty")]
    EmptySample,
    #[error("linear system is singular (condition number {0:e})")]
    SingularSystem(f64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
            Error::MissingColumn(_) => "MissingColumn",
            Error::DuplicateUnit(_) => "DuplicateUnit",
            Error::InvalidProbability { .. } => "InvalidProbability",
            Error::NonPositiveCost { .. } => "NonPositiveCost",
            Error::NonPositiveWeight { .. } => "NonPositiveWeight",
            Error::MissingMembership { .. } => "MissingMembership",
            Error::MixedMembership { .. } => "MixedMembership",
            Error::UnknownDomain(_) => "UnknownDomain",
            Error::HeterogeneousStratum { .. } => "HeterogeneousStratum",
            Error::Parse { .. } => "Parse",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::DomainOversample { .. } => "DomainOversample",
            Error::PartitionMismatch { .. } => "PartitionMismatch",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::InvalidRho(_) => "InvalidRho",
            Error::SingularOmega => "SingularOmega",
            Error::ZeroSample => "ZeroSample",
            Error::SingularMxx(_) => "SingularMXX",
            Error::EmptyDomain => "EmptyDomain",
            Error::InvalidVariance(_) => "InvalidVariance",
            Error::InfeasibleDomain(_) => "InfeasibleDomain",
            Error::Infeasible(_) => "Infeasible",
            Error::MaxIterations(_) => "MaxIterations",
            Error::DivergenceDetected(_) => "DivergenceDetected",
            Error::InvalidProblem(_) => "InvalidProblem",
            Error::Solver(_) => "Solver",
            Error::InconsistentAllocation(_) => "InconsistentAllocation",
            Error::DegenerateSpec(_) => "DegenerateSpec",
            Error::NonIntegerSize { .. } => "NonIntegerSize",
            Error::ClusterTooSmall { .. } => "ClusterTooSmall",
            Error::EmptySample => "EmptySample",
            Error::SingularSystem(_) => "SingularSystem",
        }
    }
}
