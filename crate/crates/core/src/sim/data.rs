//! Synthetic potential outcomes, covariate cleaning and village-based
//! stratifications.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::{draw_rng, groups_from_labels, Allocation, DesignSpec};
use crate::error::{Error, Result};
use crate::io::RawCovariates;
use crate::linear::center_columns;

/// Standardized values above this are capped in top-coded columns.
pub const TOPCODE_LIMIT: f64 = 5.0;
/// Per-village allocation pattern for four arms, applied from the left.
pub const VILLAGE_PATTERN: [usize; 10] = [3, 2, 1, 0, 3, 2, 3, 2, 3, 2];
pub const MIN_STRATUM_SIZE: usize = 4;

/// One standard logistic shock per unit from the stream (seed, 0).
pub fn logistic_shocks(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = draw_rng(seed, 0);
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u.ln() - (-u).ln_1p();
            }
        })
        .collect()
}

/// y_ai = 1{intercept_a + x_i'slopes > ε_i}, with the shocks shared across arms.
pub fn impute_potential_outcomes(
    covariates: &DMatrix<f64>,
    slopes: &[f64],
    intercepts: &[f64],
    seed: u64,
) -> Result<DVector<f64>> {
    let (n, p) = covariates.shape();
    if slopes.len() != p {
        return Err(Error::Dimension(format!("{} slopes for {p} covariates", slopes.len())));
    }
    if intercepts.is_empty() {
        return Err(Error::Dimension("need one intercept per arm".into()));
    }
    let shocks = logistic_shocks(n, seed);
    let index: Vec<f64> = (0..n).map(|i| (0..p).map(|j| covariates[(i, j)] * slopes[j]).sum()).collect();
    Ok(DVector::from_fn(intercepts.len() * n, |u, _| {
        let i = u % n;
        (intercepts[u / n] + index[i] > shocks[i]) as u8 as f64
    }))
}

/// Mean-impute, standardize (sample standard deviation), cap top-coded
/// columns at 5, then center.
pub fn preprocess_covariates(raw: &RawCovariates, topcode: &[String]) -> Result<DMatrix<f64>> {
    let n = raw.rows.len();
    let p = raw.names.len();
    for name in topcode {
        if !raw.names.contains(name) {
            return Err(Error::Covariates(format!("top-code column `{name}` not found")));
        }
    }
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        let observed: Vec<f64> = raw.rows.iter().filter_map(|r| r[j]).collect();
        if observed.is_empty() {
            return Err(Error::Covariates(format!("column `{}` has no values", raw.names[j])));
        }
        let fill = observed.iter().sum::<f64>() / observed.len() as f64;
        for i in 0..n {
            x[(i, j)] = raw.rows[i][j].unwrap_or(fill);
        }
        let mut col = x.column_mut(j);
        let mean = col.mean();
        let sd = if n > 1 { (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        if !(sd > 0.0) {
            return Err(Error::Covariates(format!("column `{}` is constant", raw.names[j])));
        }
        col.apply(|v| *v = (*v - mean) / sd);
        if topcode.contains(&raw.names[j]) {
            col.apply(|v| *v = v.min(TOPCODE_LIMIT));
        }
    }
    Ok(center_columns(&x))
}

/// Centered iid standard normal covariates from the stream (seed, 0).
pub fn normal_covariates(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = draw_rng(seed, 0);
    center_columns(&DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal)))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[m - 1] + values[m]) / 2.0
    } else {
        values[m]
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Strata from a within-village median split on two variables (four types:
/// both at or below, second above, first above, both above). Strata smaller
/// than `min_size` merge with the same type in the lowest-indexed other
/// village sharing a network component. Returns a stratum label per unit,
/// numbered by first appearance.
pub fn village_strata(
    village: &[usize],
    first: &[f64],
    second: &[f64],
    component: &[usize],
    min_size: usize,
) -> Result<Vec<usize>> {
    let n = village.len();
    if first.len() != n || second.len() != n || component.len() != n {
        return Err(Error::Dimension("village, variables and components must have one entry per unit".into()));
    }
    let villages = groups_from_labels(village);
    let village_ids: Vec<usize> = villages.iter().map(|g| village[g[0]]).collect();
    let slot = |v: usize| village_ids.binary_search(&v).expect("village id listed");
    let mut kind = vec![0usize; n];
    for members in &villages {
        let m1 = median(&mut members.iter().map(|&i| first[i]).collect::<Vec<_>>());
        let m2 = median(&mut members.iter().map(|&i| second[i]).collect::<Vec<_>>());
        for &i in members {
            kind[i] = 2 * (first[i] > m1) as usize + (second[i] > m2) as usize;
        }
    }
    let nv = villages.len();
    let key = |i: usize| slot(village[i]) * 4 + kind[i];
    let mut size = vec![0usize; nv * 4];
    for i in 0..n {
        size[key(i)] += 1;
    }
    let comps: Vec<Vec<usize>> = villages
        .iter()
        .map(|g| {
            let mut c: Vec<usize> = g.iter().map(|&i| component[i]).collect();
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect();
    let mut parent: Vec<usize> = (0..nv * 4).collect();
    for v in 0..nv {
        for t in 0..4 {
            let s = v * 4 + t;
            if size[s] == 0 || size[s] >= min_size {
                continue;
            }
            let partner = (0..nv).find(|&w| w != v && size[w * 4 + t] > 0 && comps[w].iter().any(|c| comps[v].binary_search(c).is_ok()));
            if let Some(w) = partner {
                let (a, b) = (find(&mut parent, s), find(&mut parent, w * 4 + t));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut relabel = std::collections::HashMap::new();
    Ok((0..n)
        .map(|i| {
            let root = find(&mut parent, key(i));
            let next = relabel.len();
            *relabel.entry(root).or_insert(next)
        })
        .collect())
}

/// Finely stratified design: complete randomization to four arms within each
/// village stratum, remainders filling the highest arms first.
pub fn village_stratified_design(strata: &[usize]) -> Result<DesignSpec> {
    DesignSpec::stratified(strata.len(), 4, groups_from_labels(strata), &Allocation::Equal)
}

/// Village-level design: each village gets counts from [`VILLAGE_PATTERN`].
pub fn village_pattern_design(village: &[usize]) -> Result<DesignSpec> {
    DesignSpec::stratified(village.len(), 4, groups_from_labels(village), &Allocation::Pattern { arms: VILLAGE_PATTERN.to_vec() })
}
