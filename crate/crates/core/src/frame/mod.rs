//! Population frames: units, domain partitions and strata.
//!
//! A frame lists every population unit with its stratum, its domain in
//! each declared partition (or, for modeled partitions, the probability of
//! belonging to each domain), its survey cost and optional cluster and
//! covariates. Domains are indexed globally `0..D` across partitions.

mod csv_io;
mod strata;
pub mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_frame, read_frame, write_frame, FrameSchema, PartitionColumns, ProbabilityColumn};
pub use strata::{build_strata, Cluster, Stratum, StratumTable};
pub use synthetic::{generate_population, Population, SyntheticSpec};

/// A disjoint cover of the population by a subset of the domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    /// Global indices of the member domains, in declared order.
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DomainStructureRepr", try_from = "DomainStructureRepr")]
pub struct DomainStructure {
    labels: Vec<String>,
    partitions: Vec<Partition>,
    par_of: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DomainStructureRepr {
    partitions: Vec<PartitionRepr>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    name: String,
    domains: Vec<String>,
}

impl From<DomainStructure> for DomainStructureRepr {
    fn from(d: DomainStructure) -> Self {
        DomainStructureRepr {
            partitions: d
                .partitions
                .iter()
                .map(|p| PartitionRepr {
                    name: p.name.clone(),
                    domains: p.domains.iter().map(|&i| d.labels[i].clone()).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<DomainStructureRepr> for DomainStructure {
    type Error = Error;

    fn try_from(r: DomainStructureRepr) -> Result<Self> {
        DomainStructure::new(r.partitions.into_iter().map(|p| (p.name, p.domains)).collect())
    }
}

impl DomainStructure {
    /// Builds the structure from `(partition name, domain labels)` pairs.
    /// Domains are numbered consecutively in the order given.
    pub fn new(partitions: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut labels = Vec::new();
        let mut parts = Vec::with_capacity(partitions.len());
        let mut par_of = Vec::new();
        let mut names = HashSet::new();
        for (p, (name, domains)) in partitions.into_iter().enumerate() {
            if !names.insert(name.clone()) {
                return Err(Error::InvalidSpec(format!("duplicate partition `{name}`")));
            }
            if domains.is_empty() {
                return Err(Error::InvalidSpec(format!("partition `{name}` has no domains")));
            }
            let mut seen = HashSet::new();
            let mut idx = Vec::with_capacity(domains.len());
            for label in domains {
                if !seen.insert(label.clone()) {
                    return Err(Error::InvalidSpec(format!(
                        "duplicate domain `{label}` in partition `{name}`"
                    )));
                }
                idx.push(labels.len());
                labels.push(label);
                par_of.push(p);
            }
            parts.push(Partition { name, domains: idx });
        }
        Ok(DomainStructure {
            labels,
            partitions: parts,
            par_of,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, d: usize) -> &str {
        &self.labels[d]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    /// Index of the partition containing domain `d`.
    pub fn par_of(&self, d: usize) -> usize {
        self.par_of[d]
    }

    pub fn partition_index(&self, name: &str) -> Option<usize> {
        self.partitions.iter().position(|p| p.name == name)
    }

    pub fn find(&self, partition: usize, label: &str) -> Option<usize> {
        self.partitions[partition]
            .domains
            .iter()
            .copied()
            .find(|&d| self.labels[d] == label)
    }

    /// Position of `d` inside its own partition.
    pub fn local_index(&self, d: usize) -> usize {
        let p = &self.partitions[self.par_of[d]];
        p.domains.iter().position(|&x| x == d).expect("domain in its partition")
    }

    /// `partition:label`, unique across the structure.
    pub fn qualified_name(&self, d: usize) -> String {
        format!("{}:{}", self.partitions[self.par_of[d]].name, self.labels[d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub stratum: String,
    /// Domains with known membership, at most one per partition.
    pub memberships: Vec<usize>,
    /// Modeled membership probabilities `(domain, phi)`.
    pub membership_probs: Vec<(usize, f64)>,
    pub cost: f64,
    pub cluster: Option<String>,
    pub covariates: Vec<f64>,
    pub weight: f64,
}

impl Unit {
    /// Membership weight of the unit in domain `d`: 1/0 when known,
    /// `phi` when modeled.
    pub fn coverage(&self, d: usize) -> f64 {
        if self.memberships.contains(&d) {
            return 1.0;
        }
        self.membership_probs
            .iter()
            .find(|(k, _)| *k == d)
            .map_or(0.0, |&(_, p)| p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitFrame {
    domains: DomainStructure,
    units: Vec<Unit>,
    covariate_names: Vec<String>,
}

impl UnitFrame {
    pub fn new(
        domains: DomainStructure,
        units: Vec<Unit>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(units.len());
        for u in &units {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::DuplicateUnit(u.id.clone()));
            }
            if !(u.cost > 0.0) || !u.cost.is_finite() {
                return Err(Error::NonPositiveCost {
                    unit: u.id.clone(),
                    value: u.cost,
                });
            }
            if !(u.weight > 0.0) || !u.weight.is_finite() {
                return Err(Error::NonPositiveWeight {
                    unit: u.id.clone(),
                    value: u.weight,
                });
            }
            if u.covariates.len() != covariate_names.len() {
                return Err(Error::InvalidSpec(format!(
                    "unit `{}` has {} covariates, expected {}",
                    u.id,
                    u.covariates.len(),
                    covariate_names.len()
                )));
            }
            for &(d, p) in &u.membership_probs {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidProbability {
                        unit: u.id.clone(),
                        value: p,
                    });
                }
                if d >= domains.len() {
                    return Err(Error::UnknownDomain(d.to_string()));
                }
            }
            for (pi, part) in domains.partitions().iter().enumerate() {
                let known = u
                    .memberships
                    .iter()
                    .filter(|&&d| d < domains.len() && domains.par_of(d) == pi)
                    .count();
                let modeled = u
                    .membership_probs
                    .iter()
                    .filter(|(d, _)| domains.par_of(*d) == pi)
                    .count();
                match (known, modeled) {
                    (1, 0) | (0, 1..) => {}
                    (0, 0) => {
                        return Err(Error::MissingMembership {
                            unit: u.id.clone(),
                            partition: part.name.clone(),
                        })
                    }
                    (1, _) => {
                        return Err(Error::MixedMembership {
                            unit: u.id.clone(),
                            partition: part.name.clone(),
                        })
                    }
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "unit `{}` belongs to several domains of partition `{}`",
                            u.id, part.name
                        )))
                    }
                }
            }
            if let Some(&d) = u.memberships.iter().find(|&&d| d >= domains.len()) {
                return Err(Error::UnknownDomain(d.to_string()));
            }
        }
        Ok(UnitFrame {
            domains,
            units,
            covariate_names,
        })
    }

    pub fn domains(&self) -> &DomainStructure {
        &self.domains
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Expected domain sizes: `N_d = sum_i lambda_di` for known membership,
    /// `sum_i phi_di` for modeled membership.
    pub fn domain_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.domains.len()];
        for u in &self.units {
            for &d in &u.memberships {
                counts[d] += 1.0;
            }
            for &(d, p) in &u.membership_probs {
                counts[d] += p;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_partitions() -> DomainStructure {
        DomainStructure::new(vec![
            ("region".into(), vec!["north".into(), "south".into()]),
            ("activity".into(), vec!["a".into(), "b".into(), "c".into()]),
        ])
        .unwrap()
    }

    fn unit(id: &str, memberships: Vec<usize>) -> Unit {
        Unit {
            id: id.into(),
            stratum: "h".into(),
            memberships,
            membership_probs: vec![],
            cost: 1.0,
            cluster: None,
            covariates: vec![],
            weight: 1.0,
        }
    }

    #[test]
    fn par_of_contains_domain() {
        let d = two_partitions();
        for k in 0..d.len() {
            assert!(d.partitions()[d.par_of(k)].domains.contains(&k));
        }
        assert_eq!(d.find(1, "c"), Some(4));
        assert_eq!(d.qualified_name(0), "region:north");
    }

    #[test]
    fn rejects_missing_and_mixed_membership() {
        let d = two_partitions();
        let err = UnitFrame::new(d.clone(), vec![unit("1", vec![0])], vec![]).unwrap_err();
        assert!(matches!(err, Error::MissingMembership { .. }));

        let mut u = unit("1", vec![0, 2]);
        u.membership_probs = vec![(3, 0.5)];
        let err = UnitFrame::new(d, vec![u], vec![]).unwrap_err();
        assert!(matches!(err, Error::MixedMembership { .. }));
    }

    #[test]
    fn known_and_modeled_partitions_can_coexist() {
        let d = two_partitions();
        let mut u = unit("1", vec![1]);
        u.membership_probs = vec![(2, 0.25), (3, 0.75)];
        let frame = UnitFrame::new(d, vec![u], vec![]).unwrap();
        assert_eq!(frame.domain_counts(), vec![0.0, 1.0, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn duplicate_ids_and_bad_costs() {
        let d = two_partitions();
        let err = UnitFrame::new(
            d.clone(),
            vec![unit("1", vec![0, 2]), unit("1", vec![1, 3])],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateUnit(_)));

        let mut u = unit("1", vec![0, 2]);
        u.cost = 0.0;
        assert!(matches!(
            UnitFrame::new(d, vec![u], vec![]).unwrap_err(),
            Error::NonPositiveCost { .. }
        ));
    }

    #[test]
    fn structure_serde_roundtrip() {
        let d = two_partitions();
        let json = serde_json::to_string(&d).unwrap();
        let back: DomainStructure = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
    }
}
