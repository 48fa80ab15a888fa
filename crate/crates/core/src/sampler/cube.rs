//! Cube method for balanced sampling.
//!
//! The flight phase is a random walk on `pi` inside the kernel of the
//! balancing matrix, restricted to the units still fractional. Each step
//! moves along a kernel direction until some unit reaches 0 or 1, choosing
//! the direction's sign so that `E(pi^{t+1}) = pi^t`. Units are fed in
//! through a small working window, so a step costs a dense elimination on a
//! handful of rows and columns rather than on the whole frame.
//!
//! When no kernel direction is left, the landing phase drops the last
//! constraint and flies again, until every unit is 0 or 1.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::DesignRng;

const SNAP: f64 = 1e-10;

fn is_integral(p: f64) -> bool {
    p <= SNAP || p >= 1.0 - SNAP
}

/// Balanced selection: returns the 0/1 indicator per unit.
///
/// `rows[k]` lists `(constraint, a_k)`; constraint 0 has the highest
/// priority and the last one is relaxed first. The walk keeps
/// `sum_k pi_k a_k` fixed for every active constraint.
pub(crate) fn cube(
    rows: &[Vec<(usize, f64)>],
    n_constraints: usize,
    pi: &[f64],
    rng: &mut DesignRng,
    landing: bool,
) -> Result<Vec<bool>> {
    if rows.len() != pi.len() {
        return Err(Error::DegenerateSpec("one balancing row per unit is required".into()));
    }
    if let Some(p) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::DegenerateSpec(format!("inclusion probability {p} outside [0, 1]")));
    }
    let mut p: Vec<f64> = pi.to_vec();

    // Random order, with units of the same support pattern kept together so
    // the window touches few constraints.
    let mut order: Vec<usize> = (0..p.len()).filter(|&k| !is_integral(p[k])).collect();
    order.shuffle(rng);
    let mut pattern: HashMap<Vec<usize>, usize> = HashMap::new();
    let keys: Vec<usize> = order
        .iter()
        .map(|&k| {
            let support: Vec<usize> = rows[k].iter().map(|e| e.0).collect();
            let next = pattern.len();
            *pattern.entry(support).or_insert(next)
        })
        .collect();
    let mut keyed: Vec<(usize, usize)> = keys.into_iter().zip(order).collect();
    keyed.sort_by_key(|e| e.0);
    let order: Vec<usize> = keyed.into_iter().map(|e| e.1).collect();

    let mut active_constraints = n_constraints;
    let mut window: Vec<usize> = Vec::new();
    let mut touched: HashMap<usize, usize> = HashMap::new();
    let mut next = 0;

    let add = |touched: &mut HashMap<usize, usize>, k: usize, limit: usize| {
        for &(c, a) in &rows[k] {
            if c < limit && a != 0.0 {
                *touched.entry(c).or_insert(0) += 1;
            }
        }
    };
    let remove = |touched: &mut HashMap<usize, usize>, k: usize, limit: usize| {
        for &(c, a) in &rows[k] {
            if c < limit && a != 0.0 {
                if let Some(v) = touched.get_mut(&c) {
                    *v -= 1;
                    if *v == 0 {
                        touched.remove(&c);
                    }
                }
            }
        }
    };

    loop {
        while touched.len() >= window.len() && next < order.len() {
            let k = order[next];
            next += 1;
            window.push(k);
            add(&mut touched, k, active_constraints);
        }
        if window.is_empty() {
            break;
        }
        let mut cons: Vec<usize> = touched.keys().copied().collect();
        cons.sort_unstable();
        match kernel_vector(rows, &window, &cons) {
            Some(u) => {
                step(&mut p, &window, &u, rng);
                let mut kept = Vec::with_capacity(window.len());
                for &k in &window {
                    if is_integral(p[k]) {
                        p[k] = if p[k] >= 0.5 { 1.0 } else { 0.0 };
                        remove(&mut touched, k, active_constraints);
                    } else {
                        kept.push(k);
                    }
                }
                window = kept;
            }
            None => {
                // next == order.len() here: the flight is over.
                if !landing {
                    return Err(Error::DegenerateSpec(format!(
                        "{} units remain fractional with every constraint active",
                        window.len()
                    )));
                }
                if active_constraints == 0 {
                    return Err(Error::DegenerateSpec("landing failed to resolve units".into()));
                }
                active_constraints -= 1;
                touched.clear();
                for &k in &window {
                    add(&mut touched, k, active_constraints);
                }
            }
        }
    }
    Ok(p.into_iter().map(|v| v >= 0.5).collect())
}

/// A nonzero `u` over `window` with `sum_k u_k a_kc = 0` for every `c` in
/// `cons`, or `None` when the columns are independent.
fn kernel_vector(rows: &[Vec<(usize, f64)>], window: &[usize], cons: &[usize]) -> Option<Vec<f64>> {
    let r = cons.len();
    let w = window.len();
    let index: HashMap<usize, usize> = cons.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut m = vec![0.0; r * w];
    for (j, &k) in window.iter().enumerate() {
        for &(c, a) in &rows[k] {
            if let Some(&i) = index.get(&c) {
                m[i * w + j] += a;
            }
        }
    }
    let scale = m.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1e-300);
    let tol = 1e-9 * scale;
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut row = 0;
    let mut free = None;
    for col in 0..w {
        if row == r {
            free.get_or_insert(col);
            break;
        }
        let (best, val) = (row..r)
            .map(|i| (i, m[i * w + col].abs()))
            .fold((row, 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
        if val <= tol {
            free.get_or_insert(col);
            continue;
        }
        if best != row {
            for j in 0..w {
                m.swap(best * w + j, row * w + j);
            }
        }
        let piv = m[row * w + col];
        for j in 0..w {
            m[row * w + j] /= piv;
        }
        for i in 0..r {
            if i != row {
                let f = m[i * w + col];
                if f != 0.0 {
                    for j in 0..w {
                        m[i * w + j] -= f * m[row * w + j];
                    }
                }
            }
        }
        pivots.push((row, col));
        row += 1;
    }
    let f = free?;
    let mut u = vec![0.0; w];
    u[f] = 1.0;
    for &(i, c) in &pivots {
        u[c] = -m[i * w + f];
    }
    Some(u)
}

/// One martingale move along `u`.
fn step(p: &mut [f64], window: &[usize], u: &[f64], rng: &mut DesignRng) {
    let (mut up, mut down) = (f64::INFINITY, f64::INFINITY);
    for (&k, &v) in window.iter().zip(u) {
        if v > 1e-14 {
            up = up.min((1.0 - p[k]) / v);
            down = down.min(p[k] / v);
        } else if v < -1e-14 {
            up = up.min(p[k] / -v);
            down = down.min((1.0 - p[k]) / -v);
        }
    }
    let lambda = if rng.random::<f64>() < down / (up + down) { up } else { -down };
    for (&k, &v) in window.iter().zip(u) {
        p[k] = (p[k] + lambda * v).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_domains(pi: &[f64], split: usize) -> Vec<Vec<(usize, f64)>> {
        (0..pi.len()).map(|k| vec![(usize::from(k >= split), 1.0)]).collect()
    }

    #[test]
    fn integral_totals_are_exact() {
        // planned n = (2, 3) over 4 + 6 units
        let pi = vec![0.5; 10];
        let rows = two_domains(&pi, 4);
        for seed in 0..500 {
            let s = cube(&rows, 2, &pi, &mut stream(seed, 0), false).unwrap();
            let a = s[..4].iter().filter(|&&x| x).count();
            let b = s[4..].iter().filter(|&&x| x).count();
            assert_eq!((a, b), (2, 3));
        }
    }

    #[test]
    fn census_is_deterministic() {
        let pi = vec![1.0; 5];
        let s = cube(&two_domains(&pi, 2), 2, &pi, &mut stream(1, 0), false).unwrap();
        assert!(s.iter().all(|&x| x));
    }

    #[test]
    fn fractional_totals_need_landing() {
        let pi = vec![0.3, 0.3, 0.3];
        let rows = two_domains(&pi, 3);
        assert!(matches!(
            cube(&rows, 1, &pi, &mut stream(0, 0), false),
            Err(Error::DegenerateSpec(_))
        ));
        let s = cube(&rows, 1, &pi, &mut stream(0, 0), true).unwrap();
        let n = s.iter().filter(|&&x| x).count();
        assert!(n <= 1);
    }

    #[test]
    fn kernel_of_overlapping_rows() {
        let rows = vec![vec![(0, 1.0), (1, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)]];
        let u = kernel_vector(&rows, &[0, 1, 2], &[0, 1]).unwrap();
        assert!((u[0] + u[1]).abs() < 1e-12 && (u[0] + u[2]).abs() < 1e-12);
        assert!(kernel_vector(&rows, &[1, 2], &[0, 1]).is_none());
    }

    mod props {
        use super::*;
        use crate::rng::stream;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Domains with integral expected counts get exactly that count.
            #[test]
            fn integral_domain_totals_are_hit(
                domains in proptest::collection::vec((2usize..30, 0.0f64..1.0), 1..6),
                seed in 0u64..1_000,
            ) {
                let mut pi = Vec::new();
                let mut rows = Vec::new();
                let mut want = Vec::new();
                for (d, &(size, frac)) in domains.iter().enumerate() {
                    let n = ((size as f64 * frac).round() as usize).min(size);
                    want.push(n);
                    pi.extend(std::iter::repeat(n as f64 / size as f64).take(size));
                    rows.extend(std::iter::repeat(vec![(d, 1.0)]).take(size));
                }
                let s = cube(&rows, domains.len(), &pi, &mut stream(seed, 0), false).unwrap();
                let mut got = vec![0usize; domains.len()];
                for (k, &x) in s.iter().enumerate() {
                    if x {
                        got[rows[k][0].0] += 1;
                    }
                }
                prop_assert_eq!(got, want);
            }
        }
    }
}
