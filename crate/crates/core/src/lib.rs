//! Minimum-cost sample designs for small-area estimation.
//!
//! The crate covers the whole planning loop: ingest a population frame with
//! overlapping domain partitions, compute the cheapest allocation whose
//! model-based MSE meets per-domain thresholds, draw a balanced sample that
//! realizes it, and check the MSE formulas by Monte Carlo with BLUP
//! predictors.

pub mod allocate;
pub mod error;
pub mod estimator;
pub mod frame;
mod linalg;
pub mod mse;
pub mod presets;
pub mod report;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result, Violation};
pub use frame::{DomainStructure, Partition, StratumTable, Unit, UnitFrame};
pub use mse::{OmegaSpec, VarianceComponents};
pub use allocate::{solve, AllocationResult, DesignMode, DesignProblem, ProblemSpec, SolverOptions, Status};
