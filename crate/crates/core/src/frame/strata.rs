use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DomainStructure, UnitFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub size: usize,
    /// Unit indices into the originating frame.
    #[serde(skip)]
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub size: usize,
    /// Mean unit cost over the stratum.
    pub cost: f64,
    /// Nonzero `(domain, weight)` pairs: the incidence λ_d[h] for known
    /// partitions, the membership probability φ_d[h] for modeled ones.
    pub coverage: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<Cluster>,
    #[serde(skip)]
    pub members: Vec<usize>,
}

impl Stratum {
    pub fn coverage(&self, d: usize) -> f64 {
        self.coverage
            .iter()
            .find(|(k, _)| *k == d)
            .map_or(0.0, |&(_, w)| w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    pub domains: DomainStructure,
    pub strata: Vec<Stratum>,
}

impl StratumTable {
    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn population(&self) -> usize {
        self.strata.iter().map(|s| s.size).sum()
    }

    /// `N_d = sum_h N_h * coverage_d[h]`.
    pub fn domain_sizes(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.domains.len()];
        for s in &self.strata {
            for &(d, w) in &s.coverage {
                out[d] += s.size as f64 * w;
            }
        }
        out
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.strata.iter().position(|s| s.id == id)
    }
}

const PHI_TOL: f64 = 1e-12;

/// Groups the frame's units by stratum key, in order of first appearance.
///
/// Every stratum must be homogeneous: in each partition all of its units
/// share the same known domain, or all carry the same membership
/// probabilities.
pub fn build_strata(frame: &UnitFrame) -> Result<StratumTable> {
    let domains = frame.domains();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, u) in frame.units().iter().enumerate() {
        let h = *index.entry(u.stratum.as_str()).or_insert_with(|| {
            groups.push((u.stratum.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[h].1.push(i);
    }

    let mut strata = Vec::with_capacity(groups.len());
    for (id, members) in groups {
        let first = &frame.units()[members[0]];
        let mut coverage: Vec<(usize, f64)> = Vec::new();
        for (pi, part) in domains.partitions().iter().enumerate() {
            let profile = |k: usize| -> Vec<(usize, f64)> {
                let u = &frame.units()[k];
                part.domains
                    .iter()
                    .map(|&d| (d, u.coverage(d)))
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            };
            let known = |k: usize| {
                frame.units()[k]
                    .memberships
                    .iter()
                    .any(|&d| domains.par_of(d) == pi)
            };
            let reference = profile(members[0]);
            let ref_known = known(members[0]);
            for &k in &members[1..] {
                let p = profile(k);
                let same = known(k) == ref_known
                    && p.len() == reference.len()
                    && p.iter()
                        .zip(&reference)
                        .all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= PHI_TOL);
                if !same {
                    return Err(Error::HeterogeneousStratum {
                        stratum: id,
                        partition: part.name.clone(),
                    });
                }
            }
            coverage.extend(reference);
        }

        let cost = members.iter().map(|&k| frame.units()[k].cost).sum::<f64>() / members.len() as f64;

        let mut clusters: Vec<Cluster> = Vec::new();
        if first.cluster.is_some() {
            let mut cindex: HashMap<&str, usize> = HashMap::new();
            for &k in &members {
                let Some(c) = frame.units()[k].cluster.as_deref() else {
                    return Err(Error::InvalidSpec(format!(
                        "stratum `{id}` mixes clustered and unclustered units"
                    )));
                };
                let j = *cindex.entry(c).or_insert_with(|| {
                    clusters.push(Cluster {
                        id: c.to_string(),
                        size: 0,
                        members: Vec::new(),
                    });
                    clusters.len() - 1
                });
                clusters[j].size += 1;
                clusters[j].members.push(k);
            }
        } else if members.iter().any(|&k| frame.units()[k].cluster.is_some()) {
            return Err(Error::InvalidSpec(format!(
                "stratum `{id}` mixes clustered and unclustered units"
            )));
        }

        strata.push(Stratum {
            id,
            size: members.len(),
            cost,
            coverage,
            clusters,
            members,
        });
    }
    Ok(StratumTable {
        domains: domains.clone(),
        strata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Unit;

    fn structure() -> DomainStructure {
        DomainStructure::new(vec![
            ("region".into(), vec!["r1".into(), "r2".into()]),
            ("activity".into(), vec!["a1".into(), "a2".into(), "a3".into()]),
        ])
        .unwrap()
    }

    fn unit(id: usize, stratum: &str, r: usize, a: usize) -> Unit {
        Unit {
            id: id.to_string(),
            stratum: stratum.into(),
            memberships: vec![r, 2 + a],
            membership_probs: vec![],
            cost: 1.0,
            cluster: None,
            covariates: vec![],
            weight: 1.0,
        }
    }

    #[test]
    fn cross_classification_gives_six_strata() {
        let mut units = Vec::new();
        let mut id = 0;
        for r in 0..2 {
            for a in 0..3 {
                for _ in 0..(r + a + 1) {
                    units.push(unit(id, &format!("r{r}a{a}"), r, a));
                    id += 1;
                }
            }
        }
        let frame = UnitFrame::new(structure(), units, vec![]).unwrap();
        let table = build_strata(&frame).unwrap();
        assert_eq!(table.len(), 6);
        for (h, s) in table.strata.iter().enumerate() {
            let row: Vec<f64> = (0..2).map(|d| s.coverage(d)).collect();
            let expected = if h < 3 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            assert_eq!(row, expected);
        }
        assert_eq!(table.domain_sizes(), frame.domain_counts());
        assert_eq!(table.population(), frame.len());
    }

    #[test]
    fn stratum_straddling_regions_is_rejected() {
        let units = vec![unit(0, "h", 0, 0), unit(1, "h", 1, 0)];
        let frame = UnitFrame::new(structure(), units, vec![]).unwrap();
        assert!(matches!(
            build_strata(&frame).unwrap_err(),
            Error::HeterogeneousStratum { partition, .. } if partition == "region"
        ));
    }

    #[test]
    fn modeled_strata_keep_phi() {
        let d = structure();
        let mk = |id: usize, phi: f64| Unit {
            id: id.to_string(),
            stratum: "h".into(),
            memberships: vec![0],
            membership_probs: vec![(2, phi), (3, 1.0 - phi)],
            cost: 2.0,
            cluster: None,
            covariates: vec![],
            weight: 1.0,
        };
        let frame = UnitFrame::new(d.clone(), vec![mk(0, 0.25), mk(1, 0.25)], vec![]).unwrap();
        let t = build_strata(&frame).unwrap();
        assert_eq!(t.strata[0].coverage(3), 0.75);
        assert_eq!(t.strata[0].cost, 2.0);
        let frame = UnitFrame::new(d, vec![mk(0, 0.25), mk(1, 0.5)], vec![]).unwrap();
        assert!(build_strata(&frame).is_err());
    }

    #[test]
    fn clusters_sum_to_stratum_size() {
        let mut units = Vec::new();
        for i in 0..10 {
            let mut u = unit(i, "h", 0, 0);
            u.cluster = Some(format!("c{}", i % 3));
            units.push(u);
        }
        let frame = UnitFrame::new(structure(), units, vec![]).unwrap();
        let t = build_strata(&frame).unwrap();
        let s = &t.strata[0];
        assert_eq!(s.clusters.len(), 3);
        assert_eq!(s.clusters.iter().map(|c| c.size).sum::<usize>(), s.size);
    }
}
