use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainStructure, Unit, UnitFrame};
use crate::error::{Error, Result};

/// Column roles of a CSV unit frame, stored as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSchema {
    pub id_column: String,
    pub stratum_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_column: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariate_columns: Vec<String>,
    pub partitions: Vec<PartitionColumns>,
}

/// How one partition is encoded: a label column for known membership,
/// probability columns for modeled membership, or both (a unit then uses
/// exactly one of the two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionColumns {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    /// Declared domain labels. When absent they are taken from the data in
    /// order of first appearance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probability_columns: Vec<ProbabilityColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityColumn {
    pub domain: String,
    pub column: String,
}

impl FrameSchema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

pub fn load_frame(path: impl AsRef<Path>, schema: &FrameSchema) -> Result<UnitFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_frame(std::io::BufReader::new(file), schema)
}

fn column(headers: &HashMap<String, usize>, name: &str) -> Result<usize> {
    headers
        .get(name)
        .copied()
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_f64(raw: &str, column: &str, row: usize) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        column: column.to_string(),
        row,
        value: raw.to_string(),
    })
}

struct PartitionPlan {
    label_col: Option<usize>,
    labels: Vec<String>,
    declared: bool,
    prob_cols: Vec<(usize, usize, String)>, // (label index, column, name)
}

pub fn read_frame<R: Read>(reader: R, schema: &FrameSchema) -> Result<UnitFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();

    let id_col = column(&headers, &schema.id_column)?;
    let stratum_col = column(&headers, &schema.stratum_column)?;
    let cost_col = schema.cost_column.as_deref().map(|c| column(&headers, c)).transpose()?;
    let weight_col = schema.weight_column.as_deref().map(|c| column(&headers, c)).transpose()?;
    let cluster_col = schema.cluster_column.as_deref().map(|c| column(&headers, c)).transpose()?;
    let cov_cols = schema
        .covariate_columns
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut plans = Vec::with_capacity(schema.partitions.len());
    for p in &schema.partitions {
        if p.column.is_none() && p.probability_columns.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "partition `{}` declares neither a label column nor probability columns",
                p.name
            )));
        }
        let label_col = p.column.as_deref().map(|c| column(&headers, c)).transpose()?;
        let mut labels = p.domains.clone().unwrap_or_default();
        let declared = p.domains.is_some();
        let mut prob_cols = Vec::new();
        for pc in &p.probability_columns {
            let col = column(&headers, &pc.column)?;
            let idx = match labels.iter().position(|l| *l == pc.domain) {
                Some(i) => i,
                None if !declared => {
                    labels.push(pc.domain.clone());
                    labels.len() - 1
                }
                None => return Err(Error::UnknownDomain(pc.domain.clone())),
            };
            prob_cols.push((idx, col, pc.column.clone()));
        }
        plans.push(PartitionPlan {
            label_col,
            labels,
            declared,
            prob_cols,
        });
    }

    struct RawUnit {
        id: String,
        stratum: String,
        cost: f64,
        weight: f64,
        cluster: Option<String>,
        covariates: Vec<f64>,
        known: Vec<(usize, usize)>,            // (partition, label index)
        probs: Vec<(usize, usize, f64)>,       // (partition, label index, phi)
    }

    let mut raw = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let id = get(id_col).to_string();
        let cost = match cost_col {
            Some(c) => parse_f64(get(c), schema.cost_column.as_deref().unwrap(), row)?,
            None => 1.0,
        };
        if !(cost > 0.0) {
            return Err(Error::NonPositiveCost { unit: id, value: cost });
        }
        let weight = match weight_col {
            Some(c) => parse_f64(get(c), schema.weight_column.as_deref().unwrap(), row)?,
            None => 1.0,
        };
        let cluster = cluster_col.map(|c| get(c).to_string()).filter(|s| !s.is_empty());
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariate_columns)
            .map(|(&c, name)| parse_f64(get(c), name, row))
            .collect::<Result<Vec<_>>>()?;
        let mut known = Vec::new();
        let mut probs = Vec::new();
        for (pi, plan) in plans.iter_mut().enumerate() {
            if let Some(c) = plan.label_col {
                let label = get(c);
                if !label.is_empty() {
                    let idx = match plan.labels.iter().position(|l| l == label) {
                        Some(i) => i,
                        None if !plan.declared => {
                            plan.labels.push(label.to_string());
                            plan.labels.len() - 1
                        }
                        None => return Err(Error::UnknownDomain(label.to_string())),
                    };
                    known.push((pi, idx));
                }
            }
            for (idx, c, name) in &plan.prob_cols {
                let (idx, c) = (*idx, *c);
                let cell = get(c);
                if cell.is_empty() {
                    continue;
                }
                let phi = parse_f64(cell, name, row)?;
                if !(0.0..=1.0).contains(&phi) {
                    return Err(Error::InvalidProbability { unit: id, value: phi });
                }
                if phi > 0.0 {
                    probs.push((pi, idx, phi));
                }
            }
        }
        raw.push(RawUnit {
            id,
            stratum: get(stratum_col).to_string(),
            cost,
            weight,
            cluster,
            covariates,
            known,
            probs,
        });
    }

    let domains = DomainStructure::new(
        schema
            .partitions
            .iter()
            .zip(&plans)
            .map(|(p, plan)| (p.name.clone(), plan.labels.clone()))
            .collect(),
    )?;
    let global = |p: usize, idx: usize| domains.partitions()[p].domains[idx];
    let units = raw
        .into_iter()
        .map(|r| Unit {
            memberships: r.known.iter().map(|&(p, i)| global(p, i)).collect(),
            membership_probs: r.probs.iter().map(|&(p, i, phi)| (global(p, i), phi)).collect(),
            id: r.id,
            stratum: r.stratum,
            cost: r.cost,
            cluster: r.cluster,
            covariates: r.covariates,
            weight: r.weight,
        })
        .collect();
    UnitFrame::new(domains, units, schema.covariate_columns.clone())
}

/// Writes `frame` as CSV and returns the schema describing it.
pub fn write_frame<W: Write>(frame: &UnitFrame, writer: W) -> Result<FrameSchema> {
    let domains = frame.domains();
    let has_cluster = frame.units().iter().any(|u| u.cluster.is_some());
    let mut partitions = Vec::new();
    let mut header: Vec<String> = vec!["unit_id".into(), "stratum".into(), "cost".into(), "weight".into()];
    if has_cluster {
        header.push("cluster".into());
    }
    header.extend(frame.covariate_names().iter().cloned());

    // (partition index, has labels, has probabilities)
    let mut layout = Vec::new();
    for (pi, p) in domains.partitions().iter().enumerate() {
        let known = frame
            .units()
            .iter()
            .any(|u| u.memberships.iter().any(|&d| domains.par_of(d) == pi));
        let modeled = frame
            .units()
            .iter()
            .any(|u| u.membership_probs.iter().any(|(d, _)| domains.par_of(*d) == pi));
        let labels: Vec<String> = p.domains.iter().map(|&d| domains.label(d).to_string()).collect();
        let column = known.then(|| p.name.clone());
        if let Some(c) = &column {
            header.push(c.clone());
        }
        let probability_columns: Vec<ProbabilityColumn> = if modeled {
            labels
                .iter()
                .map(|l| ProbabilityColumn {
                    domain: l.clone(),
                    column: format!("phi_{}_{}", p.name, l),
                })
                .collect()
        } else {
            Vec::new()
        };
        header.extend(probability_columns.iter().map(|c| c.column.clone()));
        partitions.push(PartitionColumns {
            name: p.name.clone(),
            column,
            domains: Some(labels),
            probability_columns,
        });
        layout.push((pi, known, modeled));
    }

    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for u in frame.units() {
        row.clear();
        row.push(u.id.clone());
        row.push(u.stratum.clone());
        row.push(u.cost.to_string());
        row.push(u.weight.to_string());
        if has_cluster {
            row.push(u.cluster.clone().unwrap_or_default());
        }
        row.extend(u.covariates.iter().map(|x| x.to_string()));
        for &(pi, known, modeled) in &layout {
            let part = &domains.partitions()[pi];
            if known {
                let label = u
                    .memberships
                    .iter()
                    .find(|&&d| domains.par_of(d) == pi)
                    .map(|&d| domains.label(d).to_string())
                    .unwrap_or_default();
                row.push(label);
            }
            if modeled {
                let has_probs = u.membership_probs.iter().any(|(d, _)| domains.par_of(*d) == pi);
                for &d in &part.domains {
                    if has_probs {
                        row.push(u.coverage(d).to_string());
                    } else {
                        row.push(String::new());
                    }
                }
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<frame writer>", e))?;
    Ok(FrameSchema {
        id_column: "unit_id".into(),
        stratum_column: "stratum".into(),
        cost_column: Some("cost".into()),
        weight_column: Some("weight".into()),
        cluster_column: has_cluster.then(|| "cluster".into()),
        covariate_columns: frame.covariate_names().to_vec(),
        partitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_a() -> FrameSchema {
        serde_json::from_str(
            r#"{"id_column":"id","stratum_column":"stratum","cost_column":"cost",
                "partitions":[{"name":"A","column":"domA"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_three_rows() {
        let csv = "id,stratum,domA,cost\n1,h1,a1,1.5\n2,h1,a1,1.5\n3,h2,a2,2\n";
        let frame = read_frame(csv.as_bytes(), &schema_a()).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(frame.domains().labels(), &["a1".to_string(), "a2".to_string()]);
        assert_eq!(frame.domain_counts(), vec![2.0, 1.0]);
        assert_eq!(frame.units()[2].cost, 2.0);
    }

    #[test]
    fn missing_column() {
        let csv = "id,domA,cost\n1,a1,1\n";
        assert!(matches!(
            read_frame(csv.as_bytes(), &schema_a()).unwrap_err(),
            Error::MissingColumn(c) if c == "stratum"
        ));
    }

    #[test]
    fn duplicate_unit() {
        let csv = "id,stratum,domA,cost\n1,h1,a1,1\n1,h1,a1,1\n";
        assert!(matches!(
            read_frame(csv.as_bytes(), &schema_a()).unwrap_err(),
            Error::DuplicateUnit(_)
        ));
    }

    #[test]
    fn non_positive_cost() {
        let csv = "id,stratum,domA,cost\n1,h1,a1,-2\n";
        assert!(matches!(
            read_frame(csv.as_bytes(), &schema_a()).unwrap_err(),
            Error::NonPositiveCost { .. }
        ));
    }

    #[test]
    fn probability_out_of_range() {
        let schema: FrameSchema = serde_json::from_str(
            r#"{"id_column":"id","stratum_column":"stratum",
                "partitions":[{"name":"act","probability_columns":[
                    {"domain":"x","column":"phi_x"},{"domain":"y","column":"phi_y"}]}]}"#,
        )
        .unwrap();
        let csv = "id,stratum,phi_x,phi_y\n1,h1,0.3,0.7\n2,h1,1.3,0\n";
        assert!(matches!(
            read_frame(csv.as_bytes(), &schema).unwrap_err(),
            Error::InvalidProbability { value, .. } if value == 1.3
        ));
    }

    #[test]
    fn declared_domains_reject_unknown_labels() {
        let mut schema = schema_a();
        schema.partitions[0].domains = Some(vec!["a1".into()]);
        let csv = "id,stratum,domA,cost\n1,h1,a2,1\n";
        assert!(matches!(
            read_frame(csv.as_bytes(), &schema).unwrap_err(),
            Error::UnknownDomain(_)
        ));
    }

    #[test]
    fn write_then_read_preserves_frame() {
        let csv = "id,stratum,domA,cost\n1,h1,a1,1.5\n2,h1,a1,1.5\n3,h2,a2,2\n";
        let frame = read_frame(csv.as_bytes(), &schema_a()).unwrap();
        let mut buf = Vec::new();
        let schema = write_frame(&frame, &mut buf).unwrap();
        let back = read_frame(buf.as_slice(), &schema).unwrap();
        assert_eq!(frame, back);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn any_frame_survives_a_round_trip(
                rows in proptest::collection::vec((0usize..4, 0usize..3, 0.5f64..50.0), 1..40),
            ) {
                let mut csv = String::from("id,stratum,domA,cost\n");
                for (i, (h, a, c)) in rows.iter().enumerate() {
                    csv.push_str(&format!("u{i},h{h},a{a},{c}\n"));
                }
                let frame = read_frame(csv.as_bytes(), &schema_a()).unwrap();
                let mut buf = Vec::new();
                let schema = write_frame(&frame, &mut buf).unwrap();
                prop_assert_eq!(read_frame(buf.as_slice(), &schema).unwrap(), frame);
            }
        }
    }
}
