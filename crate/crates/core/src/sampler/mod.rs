//! Sample selection realizing an allocation.
//!
//! Balanced selection uses the cube method on `b_i = pi_i a_i`, where `a_i`
//! is the unit's domain incidence (or membership probability). Balancing on
//! `b_i` fixes `sum_{i in S} a_i` at the planned `n_d`, exactly when these
//! are integers.

mod cube;

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocate::{AllocationResult, DesignMode};
use crate::error::{Error, Result};
use crate::frame::{build_strata, StratumTable, UnitFrame};
use crate::rng::{self, DesignRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancingMode {
    /// `b_i = pi_i lambda_i`.
    UnitProb,
    /// `b_i = (n_h / N_h) lambda_i`.
    Stratum,
    /// Clusters with `b_hi = m_h (N_hi / N_h) lambda_h`.
    FirstStage,
    /// `b_i = (n_h / N_h) phi_i`.
    ExpectedMembership,
}

/// Balancing variables for one selection. Selection units are frame units,
/// or clusters in first-stage mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingSpec {
    pub mode: BalancingMode,
    pub ids: Vec<String>,
    pub pi: Vec<f64>,
    /// Sparse `(domain, b_i)` per selection unit.
    pub b: Vec<Vec<(usize, f64)>>,
    /// Sparse `(domain, a_i)`, the incidence that `b_i` scales.
    pub coverage: Vec<Vec<(usize, f64)>>,
    /// Balanced domains, most protected first; landing relaxes from the end.
    pub priority: Vec<usize>,
    pub domain_names: Vec<String>,
    /// Frame unit indices of each selection unit.
    #[serde(skip)]
    pub members: Vec<Vec<usize>>,
}

impl BalancingSpec {
    /// `sum_i b_i` per domain: the planned `n_d`, or `m_d` for clusters.
    pub fn totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.domain_names.len()];
        for row in &self.b {
            for &(d, v) in row {
                t[d] += v;
            }
        }
        t
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-unit inclusion probabilities implied by a unit or stratum allocation.
fn unit_probabilities(frame: &UnitFrame, allocation: &AllocationResult) -> Result<Vec<f64>> {
    let mut pi = vec![f64::NAN; frame.len()];
    if allocation.mode == DesignMode::Unit {
        let index: HashMap<&str, usize> = frame
            .units()
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect();
        for c in &allocation.cells {
            if c.members.len() as f64 != c.size {
                return Err(Error::InconsistentAllocation(format!("cell `{}` lists no units", c.id)));
            }
            for id in &c.members {
                let &i = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::InconsistentAllocation(format!("unit `{id}` not in frame")))?;
                pi[i] = c.pi;
            }
        }
    } else {
        let table = build_strata(frame)?;
        let cells = cell_index(&table, allocation)?;
        for (s, &c) in table.strata.iter().zip(&cells) {
            for &i in &s.members {
                pi[i] = allocation.cells[c].pi;
            }
        }
    }
    if let Some(i) = pi.iter().position(|p| p.is_nan()) {
        return Err(Error::InconsistentAllocation(format!(
            "unit `{}` has no allocation",
            frame.units()[i].id
        )));
    }
    Ok(pi.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
}

/// Allocation cell for every stratum, checked against the stratum sizes.
fn cell_index(table: &StratumTable, allocation: &AllocationResult) -> Result<Vec<usize>> {
    let by_id: HashMap<&str, usize> = allocation
        .cells
        .iter()
        .enumerate()
        .map(|(k, c)| (c.id.as_str(), k))
        .collect();
    if by_id.len() != table.len() {
        return Err(Error::InconsistentAllocation(format!(
            "{} allocation cells for {} strata",
            allocation.cells.len(),
            table.len()
        )));
    }
    table
        .strata
        .iter()
        .map(|s| {
            let &k = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::InconsistentAllocation(format!("stratum `{}` not allocated", s.id)))?;
            if allocation.cells[k].size != s.size as f64 {
                return Err(Error::InconsistentAllocation(format!(
                    "stratum `{}` has {} units, allocation assumes {}",
                    s.id, s.size, allocation.cells[k].size
                )));
            }
            Ok(k)
        })
        .collect()
}

/// First-stage PPS probabilities `m_h N_hi / N_h`. Clusters that would
/// exceed 1 are taken with certainty and the rest recomputed on the
/// remainder.
pub fn first_stage_probabilities(sizes: &[usize], m: f64) -> Vec<f64> {
    let mut pi = vec![0.0; sizes.len()];
    let mut certain = vec![false; sizes.len()];
    loop {
        let m_left = m - certain.iter().filter(|&&c| c).count() as f64;
        let n_left: usize = sizes.iter().zip(&certain).filter(|(_, &c)| !c).map(|(s, _)| *s).sum();
        let mut promoted = false;
        for (i, &s) in sizes.iter().enumerate() {
            if certain[i] {
                pi[i] = 1.0;
                continue;
            }
            pi[i] = if n_left == 0 { 0.0 } else { m_left * s as f64 / n_left as f64 };
            if pi[i] > 1.0 {
                certain[i] = true;
                promoted = true;
            }
        }
        if !promoted {
            return pi;
        }
    }
}

/// Domains ordered by tightness of their partition's targets: the smallest
/// relative variance target `g1* / N_d^2` first, untargeted partitions last.
fn priority(frame: &UnitFrame, allocation: &AllocationResult, used: &[bool]) -> Vec<usize> {
    let domains = frame.domains();
    let mut tight = vec![f64::INFINITY; domains.partitions().len()];
    for report in &allocation.reports {
        for e in &report.entries {
            if let Some(g) = e.g1_star {
                if e.big_n > 0.0 && e.domain < domains.len() {
                    let p = domains.par_of(e.domain);
                    tight[p] = tight[p].min(g / (e.big_n * e.big_n));
                }
            }
        }
    }
    let mut parts: Vec<usize> = (0..domains.partitions().len()).collect();
    parts.sort_by(|a, b| tight[*a].total_cmp(&tight[*b]));
    parts
        .into_iter()
        .flat_map(|p| domains.partitions()[p].domains.clone())
        .filter(|&d| used[d])
        .collect()
}

pub fn build_balancing(
    frame: &UnitFrame,
    allocation: &AllocationResult,
    mode: BalancingMode,
) -> Result<BalancingSpec> {
    let domains = frame.domains();
    let mut ids = Vec::new();
    let mut pi = Vec::new();
    let mut b = Vec::new();
    let mut coverage = Vec::new();
    let mut members = Vec::new();
    match mode {
        BalancingMode::FirstStage => {
            if allocation.mode != DesignMode::TwoStage {
                return Err(Error::InconsistentAllocation("first-stage balancing needs a two-stage allocation".into()));
            }
            let table = build_strata(frame)?;
            let cells = cell_index(&table, allocation)?;
            for (s, &c) in table.strata.iter().zip(&cells) {
                let m = allocation.cells[c]
                    .m
                    .ok_or_else(|| Error::InconsistentAllocation("missing cluster counts".into()))?;
                if s.clusters.is_empty() {
                    return Err(Error::InconsistentAllocation(format!("stratum `{}` has no clusters", s.id)));
                }
                if m > s.clusters.len() as f64 * (1.0 + 1e-12) {
                    return Err(Error::InconsistentAllocation(format!(
                        "stratum `{}`: m = {m} exceeds its {} clusters",
                        s.id,
                        s.clusters.len()
                    )));
                }
                let sizes: Vec<usize> = s.clusters.iter().map(|c| c.size).collect();
                let probs = first_stage_probabilities(&sizes, m.min(s.clusters.len() as f64));
                for (cl, p) in s.clusters.iter().zip(probs) {
                    ids.push(cl.id.clone());
                    pi.push(p);
                    b.push(s.coverage.iter().map(|&(d, a)| (d, p * a)).collect());
                    coverage.push(s.coverage.clone());
                    members.push(cl.members.clone());
                }
            }
        }
        _ => {
            let stratum_level = matches!(mode, BalancingMode::Stratum | BalancingMode::ExpectedMembership);
            if stratum_level == (allocation.mode == DesignMode::Unit) {
                return Err(Error::InconsistentAllocation(format!(
                    "{mode:?} balancing does not fit a {:?} allocation",
                    allocation.mode
                )));
            }
            let probs = unit_probabilities(frame, allocation)?;
            for (i, (u, p)) in frame.units().iter().zip(probs).enumerate() {
                let a: Vec<(usize, f64)> = if mode == BalancingMode::ExpectedMembership {
                    let mut a: Vec<(usize, f64)> = u
                        .memberships
                        .iter()
                        .map(|&d| (d, 1.0))
                        .chain(u.membership_probs.iter().copied().filter(|e| e.1 > 0.0))
                        .collect();
                    a.sort_by_key(|e| e.0);
                    a
                } else {
                    u.memberships.iter().map(|&d| (d, 1.0)).collect()
                };
                ids.push(u.id.clone());
                pi.push(p);
                b.push(a.iter().map(|&(d, w)| (d, p * w)).collect());
                coverage.push(a);
                members.push(vec![i]);
            }
        }
    }
    let mut used = vec![false; domains.len()];
    for row in &coverage {
        for &(d, _) in row {
            used[d] = true;
        }
    }
    Ok(BalancingSpec {
        mode,
        ids,
        pi,
        b,
        coverage,
        priority: priority(frame, allocation, &used),
        domain_names: (0..domains.len()).map(|d| domains.qualified_name(d)).collect(),
        members,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Cube,
    Ssrswor,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledUnit {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
    /// Final inclusion probability.
    pub pi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_first: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_second: Option<f64>,
    pub weight: f64,
    /// Frame index.
    #[serde(skip)]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub method: SelectionMethod,
    pub seed: u64,
    pub units: Vec<SampledUnit>,
    pub domain_names: Vec<String>,
    /// `sum_{i in S} a_di`.
    pub domain_counts: Vec<f64>,
    /// Digest of the balancing spec or allocation the draw realizes.
    pub spec_hash: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    method: SelectionMethod,
    seed: u64,
    spec_hash: &'a str,
    selected: usize,
    domain_counts: Vec<(&'a str, f64)>,
}

impl SampleDraw {
    fn new(method: SelectionMethod, seed: u64, frame: &UnitFrame, units: Vec<SampledUnit>, spec_hash: String) -> Self {
        let domains = frame.domains();
        let mut counts = vec![0.0; domains.len()];
        for s in &units {
            let u = &frame.units()[s.index];
            for d in 0..domains.len() {
                counts[d] += u.coverage(d);
            }
        }
        SampleDraw {
            method,
            seed,
            units,
            domain_names: (0..domains.len()).map(|d| domains.qualified_name(d)).collect(),
            domain_counts: counts,
            spec_hash,
        }
    }

    /// Frame indices of the selected units.
    pub fn indices(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.index).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["unit_id", "cluster", "pi", "pi_first", "pi_second", "weight"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for u in &self.units {
            wtr.write_record([
                u.id.clone(),
                u.cluster.clone().unwrap_or_default(),
                u.pi.to_string(),
                opt(u.pi_first),
                opt(u.pi_second),
                u.weight.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<sample>", e))?;
        Ok(())
    }

    pub fn write_manifest<W: Write>(&self, w: W) -> Result<()> {
        let m = Manifest {
            method: self.method,
            seed: self.seed,
            spec_hash: &self.spec_hash,
            selected: self.units.len(),
            domain_counts: self
                .domain_names
                .iter()
                .map(String::as_str)
                .zip(self.domain_counts.iter().copied())
                .collect(),
        };
        serde_json::to_writer_pretty(w, &m)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeOptions {
    /// Relax constraints once the flight stalls. Without it a stalled
    /// flight is an error.
    pub landing: bool,
}

impl Default for CubeOptions {
    fn default() -> Self {
        CubeOptions { landing: true }
    }
}

/// Cube selection over the units of `spec`; returns their indices.
pub fn cube_indices(spec: &BalancingSpec, rng: &mut DesignRng, opts: CubeOptions) -> Result<Vec<usize>> {
    let position: HashMap<usize, usize> = spec.priority.iter().enumerate().map(|(k, &d)| (d, k)).collect();
    let rows: Vec<Vec<(usize, f64)>> = spec
        .coverage
        .iter()
        .map(|row| row.iter().filter_map(|&(d, a)| position.get(&d).map(|&k| (k, a))).collect())
        .collect();
    let take = cube::cube(&rows, spec.priority.len(), &spec.pi, rng, opts.landing)?;
    Ok(take.iter().enumerate().filter(|(_, &t)| t).map(|(k, _)| k).collect())
}

/// Balanced selection of frame units.
pub fn cube_select(frame: &UnitFrame, spec: &BalancingSpec, seed: u64, opts: CubeOptions) -> Result<SampleDraw> {
    if spec.mode == BalancingMode::FirstStage {
        return Err(Error::InconsistentAllocation("first-stage specs select clusters; use two_stage_select".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let chosen = cube_indices(spec, &mut rng, opts)?;
    let units = chosen
        .into_iter()
        .map(|k| {
            let i = spec.members[k][0];
            SampledUnit {
                id: spec.ids[k].clone(),
                cluster: frame.units()[i].cluster.clone(),
                pi: spec.pi[k],
                pi_first: None,
                pi_second: None,
                weight: 1.0 / spec.pi[k],
                index: i,
            }
        })
        .collect();
    Ok(SampleDraw::new(SelectionMethod::Cube, seed, frame, units, spec.digest()))
}

fn allocation_digest(allocation: &AllocationResult) -> String {
    let sizes: Vec<(&str, f64)> = allocation.cells.iter().map(|c| (c.id.as_str(), c.n)).collect();
    hex(&Sha256::digest(serde_json::to_vec(&sizes).unwrap_or_default()))
}

/// Stratified simple random sampling without replacement; every `n_h`
/// must be an integer.
pub fn ssrswor_select(frame: &UnitFrame, allocation: &AllocationResult, seed: u64) -> Result<SampleDraw> {
    if allocation.mode == DesignMode::Unit || allocation.mode == DesignMode::TwoStage {
        return Err(Error::InconsistentAllocation("SSRSWOR needs stratum sample sizes".into()));
    }
    let table = build_strata(frame)?;
    let cells = cell_index(&table, allocation)?;
    let mut rng = rng::stream(seed, 0);
    let mut units = Vec::new();
    for (s, &c) in table.strata.iter().zip(&cells) {
        let n = allocation.cells[c].n;
        let k = n.round();
        if (n - k).abs() > 1e-9 || k < 0.0 || k > s.size as f64 {
            return Err(Error::NonIntegerSize {
                stratum: s.id.clone(),
                value: n,
            });
        }
        let k = k as usize;
        if k == 0 {
            continue;
        }
        let pi = k as f64 / s.size as f64;
        let mut picked: Vec<usize> = index::sample(&mut rng, s.size, k).into_vec();
        picked.sort_unstable();
        for j in picked {
            let i = s.members[j];
            units.push(SampledUnit {
                id: frame.units()[i].id.clone(),
                cluster: frame.units()[i].cluster.clone(),
                pi,
                pi_first: None,
                pi_second: None,
                weight: 1.0 / pi,
                index: i,
            });
        }
    }
    Ok(SampleDraw::new(SelectionMethod::Ssrswor, seed, frame, units, allocation_digest(allocation)))
}

/// PPS selection of clusters balanced on domain cluster counts, then
/// `n_bar` units by SRSWOR in each selected cluster.
pub fn two_stage_select(
    frame: &UnitFrame,
    allocation: &AllocationResult,
    seed: u64,
    opts: CubeOptions,
) -> Result<SampleDraw> {
    let n_bar = allocation
        .n_bar
        .ok_or_else(|| Error::InconsistentAllocation("two-stage selection needs n_bar".into()))?;
    let take = n_bar.round() as usize;
    let table = build_strata(frame)?;
    let cells = cell_index(&table, allocation)?;
    for (s, &c) in table.strata.iter().zip(&cells) {
        if allocation.cells[c].m.unwrap_or(0.0) > 0.0 {
            if let Some(cl) = s.clusters.iter().find(|cl| cl.size < take) {
                return Err(Error::ClusterTooSmall {
                    cluster: cl.id.clone(),
                    size: cl.size,
                    take,
                });
            }
        }
    }
    let spec = build_balancing(frame, allocation, BalancingMode::FirstStage)?;
    // Final probability m_h n_bar / N_h, shared by every cluster of a stratum
    // without certainty selections.
    let mut final_pi: HashMap<String, f64> = HashMap::new();
    for (s, &c) in table.strata.iter().zip(&cells) {
        let m = allocation.cells[c].m.unwrap_or(0.0);
        let sizes: Vec<usize> = s.clusters.iter().map(|c| c.size).collect();
        let probs = first_stage_probabilities(&sizes, m.min(sizes.len() as f64));
        let promoted = probs.iter().zip(&sizes).any(|(&p, &n)| p == 1.0 && m * n as f64 / s.size as f64 > 1.0);
        for (cl, p) in s.clusters.iter().zip(probs) {
            let v = if promoted {
                p * (take as f64 / cl.size as f64)
            } else {
                m * take as f64 / s.size as f64
            };
            final_pi.insert(cl.id.clone(), v);
        }
    }

    let mut rng = rng::stream(seed, 0);
    let chosen = cube_indices(&spec, &mut rng, opts)?;
    let mut second = rng::stream(seed, 1);
    let mut units = Vec::new();
    for k in chosen {
        let members = &spec.members[k];
        let p2 = take as f64 / members.len() as f64;
        let mut picked = index::sample(&mut second, members.len(), take).into_vec();
        picked.sort_unstable();
        let pi = final_pi[&spec.ids[k]];
        for j in picked {
            let i = members[j];
            units.push(SampledUnit {
                id: frame.units()[i].id.clone(),
                cluster: Some(spec.ids[k].clone()),
                pi,
                pi_first: Some(spec.pi[k]),
                pi_second: Some(p2),
                weight: 1.0 / pi,
                index: i,
            });
        }
    }
    Ok(SampleDraw::new(SelectionMethod::TwoStage, seed, frame, units, spec.digest()))
}

/// The default selection for an allocation's design mode.
pub fn select(frame: &UnitFrame, allocation: &AllocationResult, seed: u64, opts: CubeOptions) -> Result<SampleDraw> {
    let mode = match allocation.mode {
        DesignMode::TwoStage => return two_stage_select(frame, allocation, seed, opts),
        DesignMode::Unit => BalancingMode::UnitProb,
        DesignMode::Uncertain => BalancingMode::ExpectedMembership,
        DesignMode::Stratified | DesignMode::LmmFixedPoint => BalancingMode::Stratum,
    };
    let spec = build_balancing(frame, allocation, mode)?;
    cube_select(frame, &spec, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{DomainStructure, Unit};

    fn frame(layout: &[(usize, usize)]) -> UnitFrame {
        // (stratum size, domain) pairs over one partition
        let n_dom = layout.iter().map(|l| l.1).max().unwrap() + 1;
        let d = DomainStructure::new(vec![("A".into(), (0..n_dom).map(|k| format!("a{k}")).collect())]).unwrap();
        let mut units = Vec::new();
        for (h, &(size, dom)) in layout.iter().enumerate() {
            for i in 0..size {
                units.push(Unit {
                    id: format!("h{h}u{i}"),
                    stratum: format!("h{h}"),
                    memberships: vec![dom],
                    membership_probs: vec![],
                    cost: 1.0,
                    cluster: Some(format!("h{h}c{}", i / 10)),
                    covariates: vec![],
                    weight: 1.0,
                });
            }
        }
        UnitFrame::new(d, units, vec![]).unwrap()
    }

    fn allocation(frame: &UnitFrame, mode: DesignMode, n: &[f64], n_bar: Option<f64>) -> AllocationResult {
        let table = build_strata(frame).unwrap();
        let cells = table
            .strata
            .iter()
            .zip(n)
            .map(|(s, &x)| crate::allocate::CellAllocation {
                id: s.id.clone(),
                size: s.size as f64,
                n: x,
                pi: x / s.size as f64,
                m: n_bar.map(|b| x / b),
                take_all: false,
                members: vec![],
            })
            .collect();
        AllocationResult {
            solver: crate::allocate::SolverKind::Direct,
            mode,
            status: crate::allocate::Status::Optimal,
            cost: n.iter().sum(),
            total_n: n.iter().sum(),
            n_bar,
            cells,
            domain_names: vec![],
            domain_sizes: vec![],
            domain_n: vec![],
            reports: vec![],
            binding: vec![],
            max_violation: 0.0,
            violations: vec![],
            iterations: 0,
            trace: vec![],
            contraction: vec![],
        }
    }

    #[test]
    fn stratum_census_balances_on_incidence() {
        let f = frame(&[(20, 0), (30, 1)]);
        let a = allocation(&f, DesignMode::Stratified, &[20.0, 30.0], None);
        let spec = build_balancing(&f, &a, BalancingMode::Stratum).unwrap();
        assert!(spec.b.iter().all(|row| row == &vec![(row[0].0, 1.0)]));
        let s = cube_select(&f, &spec, 3, CubeOptions::default()).unwrap();
        assert_eq!(s.units.len(), 50);
    }

    #[test]
    fn planned_domain_sizes_are_exact() {
        let f = frame(&[(40, 0), (60, 1)]);
        let a = allocation(&f, DesignMode::Stratified, &[2.0, 3.0], None);
        let spec = build_balancing(&f, &a, BalancingMode::Stratum).unwrap();
        let t = spec.totals();
        assert!((t[0] - 2.0).abs() < 1e-12 && (t[1] - 3.0).abs() < 1e-12);
        for seed in 0..200 {
            let s = cube_select(&f, &spec, seed, CubeOptions { landing: false }).unwrap();
            assert_eq!(s.domain_counts, vec![2.0, 3.0]);
        }
    }

    #[test]
    fn draws_are_reproducible() {
        let f = frame(&[(40, 0), (60, 1)]);
        let a = allocation(&f, DesignMode::Stratified, &[2.5, 3.3], None);
        let spec = build_balancing(&f, &a, BalancingMode::Stratum).unwrap();
        let bytes = |seed| {
            let mut v = Vec::new();
            cube_select(&f, &spec, seed, CubeOptions::default()).unwrap().write_csv(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(9), bytes(9));
        assert_ne!(bytes(9), bytes(10));
    }

    #[test]
    fn ssrswor_sizes_and_errors() {
        let f = frame(&[(4, 0), (10, 1)]);
        let a = allocation(&f, DesignMode::Stratified, &[0.0, 10.0], None);
        let s = ssrswor_select(&f, &a, 1).unwrap();
        assert_eq!(s.domain_counts, vec![0.0, 10.0]);
        let a = allocation(&f, DesignMode::Stratified, &[1.5, 10.0], None);
        assert!(matches!(ssrswor_select(&f, &a, 1), Err(Error::NonIntegerSize { .. })));
    }

    #[test]
    fn pps_promotes_large_clusters() {
        let p = first_stage_probabilities(&[100, 100, 100, 700], 2.0);
        assert_eq!(p[3], 1.0);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        let p = first_stage_probabilities(&[100; 10], 3.0);
        assert!(p.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn two_stage_is_self_weighting() {
        // 100-unit strata made of ten clusters of 10
        let f = frame(&[(100, 0), (100, 1)]);
        let a = allocation(&f, DesignMode::TwoStage, &[30.0, 20.0], Some(5.0));
        let s = two_stage_select(&f, &a, 4, CubeOptions::default()).unwrap();
        assert_eq!(s.domain_counts, vec![30.0, 20.0]);
        for u in &s.units {
            let m = if u.id.starts_with("h0") { 6.0 } else { 4.0 };
            assert_eq!(u.pi, m * 5.0 / 100.0);
            let product = u.pi_first.unwrap() * u.pi_second.unwrap();
            assert!((product / u.pi - 1.0).abs() < 1e-15);
        }
        let a = allocation(&f, DesignMode::TwoStage, &[30.0, 20.0], Some(11.0));
        assert!(matches!(
            two_stage_select(&f, &a, 4, CubeOptions::default()),
            Err(Error::ClusterTooSmall { .. })
        ));
    }
}
