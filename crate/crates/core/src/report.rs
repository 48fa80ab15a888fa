//! Allocation summaries by domain-size class, compared with the
//! proportional allocation of the same total.
//!
//! Domains of the classed partition are binned by the type-7 quartiles of
//! `N_d`: `[min, Q1)`, `[Q1, Q2)`, `[Q2, Q3)` and `[Q3, max]`. Realized
//! errors are `R = sqrt(g1) / Y_d`, `RAP = R / R*` and `Eff = R_pro / R_opt`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::allocate::AllocationResult;
use crate::error::{Error, Result};
use crate::mse::MseEntry;

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(Q1, Q2, Q3)` of `values`.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub partition: String,
    /// Size class or domain label.
    pub label: String,
    pub domains: usize,
    pub big_n: f64,
    pub g1_star: Option<f64>,
    pub n_opt: f64,
    pub r_opt: Option<f64>,
    pub rap_q1: Option<f64>,
    pub rap: Option<f64>,
    pub rap_q3: Option<f64>,
    pub n_pro: f64,
    pub r_pro: Option<f64>,
    pub eff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub variable: String,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn row(&self, partition: &str, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.partition == partition && r.label == label)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }
}

pub const CLASS_LABELS: [&str; 4] = ["Min-Q1", "Q1-Q2", "Q2-Q3", "Q3-Max"];
pub const ALL_LABEL: &str = "All domains";

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    (k > 0).then(|| s / k as f64)
}

fn summarize(partition: &str, label: &str, opt: &[&MseEntry], pro: &[&MseEntry]) -> ReportRow {
    let raps: Vec<f64> = opt.iter().filter_map(|e| e.rap).collect();
    let (rap_q1, rap_q3) = if raps.is_empty() {
        (None, None)
    } else {
        let (q1, _, q3) = quartiles(&raps);
        (Some(q1), Some(q3))
    };
    let r_opt = mean(opt.iter().filter_map(|e| e.r));
    let r_pro = mean(pro.iter().filter_map(|e| e.r));
    ReportRow {
        partition: partition.to_string(),
        label: label.to_string(),
        domains: opt.len(),
        big_n: mean(opt.iter().map(|e| e.big_n)).unwrap_or(0.0),
        g1_star: mean(opt.iter().filter_map(|e| e.g1_star)),
        n_opt: mean(opt.iter().map(|e| e.n)).unwrap_or(0.0),
        r_opt,
        rap_q1,
        rap: mean(raps.iter().copied()),
        rap_q3,
        n_pro: mean(pro.iter().map(|e| e.n)).unwrap_or(0.0),
        r_pro,
        eff: match (r_pro, r_opt) {
            (Some(p), Some(o)) if o > 0.0 => Some(p / o),
            _ => None,
        },
    }
}

fn partition_of(name: &str) -> &str {
    name.split_once(':').map_or("", |(p, _)| p)
}

/// Class rows for `classed`, then one row per domain of every other
/// partition.
pub fn report_table(
    optimal: &AllocationResult,
    proportional: &AllocationResult,
    variable: usize,
    classed: &str,
) -> Result<ReportTable> {
    let opt = optimal
        .reports
        .get(variable)
        .ok_or_else(|| Error::InvalidProblem(format!("no variable {variable}")))?;
    let pro = proportional
        .reports
        .get(variable)
        .ok_or_else(|| Error::InvalidProblem(format!("no variable {variable}")))?;
    if opt.entries.len() != pro.entries.len()
        || opt.entries.iter().zip(&pro.entries).any(|(a, b)| a.name != b.name)
    {
        return Err(Error::InconsistentAllocation("the two allocations cover different domains".into()));
    }
    let pairs: Vec<(&MseEntry, &MseEntry)> = opt.entries.iter().zip(&pro.entries).collect();
    let classed_pairs: Vec<_> = pairs.iter().filter(|(e, _)| partition_of(&e.name) == classed).copied().collect();
    if classed_pairs.is_empty() {
        return Err(Error::UnknownDomain(format!("partition {classed}")));
    }
    let sizes: Vec<f64> = classed_pairs.iter().map(|(e, _)| e.big_n).collect();
    let (q1, q2, q3) = quartiles(&sizes);
    let class = |n: f64| -> usize {
        if n < q1 {
            0
        } else if n < q2 {
            1
        } else if n < q3 {
            2
        } else {
            3
        }
    };

    let mut rows = Vec::new();
    for (c, label) in CLASS_LABELS.iter().enumerate() {
        let (o, p): (Vec<&MseEntry>, Vec<&MseEntry>) =
            classed_pairs.iter().filter(|(e, _)| class(e.big_n) == c).copied().unzip();
        if !o.is_empty() {
            rows.push(summarize(classed, label, &o, &p));
        }
    }
    let (o, p): (Vec<&MseEntry>, Vec<&MseEntry>) = classed_pairs.iter().copied().unzip();
    rows.push(summarize(classed, ALL_LABEL, &o, &p));
    for (o, p) in pairs.iter().filter(|(e, _)| partition_of(&e.name) != classed) {
        let (part, label) = o.name.split_once(':').unwrap_or(("", o.name.as_str()));
        rows.push(summarize(part, label, &[*o], &[*p]));
    }
    Ok(ReportTable {
        variable: opt.variable.clone(),
        rows,
    })
}

/// Iteration traces of several runs, one row per `(start, iteration)`.
pub fn write_convergence<W: Write>(runs: &[(String, &AllocationResult)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["start", "iteration", "cost", "stop_statistic", "domain_change", "max_violation"])?;
    for (start, result) in runs {
        for r in &result.trace {
            wtr.write_record([
                start.clone(),
                r.iteration.to_string(),
                r.cost.to_string(),
                r.stop_statistic.map_or(String::new(), |s| s.to_string()),
                r.domain_change.to_string(),
                r.max_violation.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<convergence>", e))?;
    Ok(())
}
