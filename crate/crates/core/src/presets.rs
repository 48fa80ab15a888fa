//! Shipped experiment configurations.
//!
//! All presets share one synthetic population: 49 municipalities (partition
//! `A`) in four size classes whose averages are the published class means,
//! aggregated into two macro-strata (partition `B`). The class counts per
//! macro-stratum are chosen so the macro-strata totals land within a few
//! units of 47,548 and 135,951.

use serde::{Deserialize, Serialize};

use crate::allocate::{DesignProblem, Initialization, ProblemSpec, SolverKind};
use crate::error::{Error, Result};
use crate::frame::{generate_population, Population, SyntheticSpec};

pub const NAMES: [&str; 5] = ["exp1", "exp2", "exp3", "exp4", "infeasible"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub description: String,
    pub population: SyntheticSpec,
    pub problem: ProblemSpec,
    pub solver: SolverKind,
    /// Starting allocations to compare, when the preset studies convergence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub starts: Vec<Initialization>,
}

impl Preset {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn population(&self) -> Result<Population> {
        generate_population(&self.population)
    }

    /// The design problem on the preset's population frame.
    pub fn design_problem(&self, population: &Population) -> Result<DesignProblem> {
        DesignProblem::from_frame(&population.frame, &self.problem)
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let text = match name {
        "exp1" => include_str!("../presets/exp1.json"),
        "exp2" => include_str!("../presets/exp2.json"),
        "exp3" => include_str!("../presets/exp3.json"),
        "exp4" => include_str!("../presets/exp4.json"),
        "infeasible" => include_str!("../presets/infeasible.json"),
        _ => {
            return Err(Error::InvalidSpec(format!(
                "unknown preset `{name}`, expected one of {}",
                NAMES.join(", ")
            )))
        }
    };
    Preset::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in NAMES {
            assert_eq!(preset(name).unwrap().name, name);
        }
        assert!(preset("exp9").is_err());
    }

    #[test]
    fn layout_matches_the_published_totals() {
        let p = preset("exp1").unwrap();
        let pop = p.population().unwrap();
        let d = pop.frame.domains();
        assert_eq!(d.partitions()[0].domains.len(), 49);
        assert_eq!(d.partitions()[1].domains.len(), 2);
        let counts = pop.frame.domain_counts();
        let b: Vec<f64> = d.partitions()[1].domains.iter().map(|&k| counts[k]).collect();
        assert_eq!(b[0] + b[1], 183_499.0);
        assert!((b[0] - 47_548.0).abs() < 10.0 && (b[1] - 135_951.0).abs() < 15.0, "{b:?}");
        let b_domains: Vec<usize> = d.partitions()[1].domains.clone();
        let in_b1 = pop.frame.units().iter().filter(|u| u.memberships.contains(&b_domains[0])).count();
        assert_eq!(in_b1 as f64, b[0]);
    }
}
