use std::collections::BTreeMap;

use super::{labels_from_counts, AssignmentRealization, DesignKind, DesignSpec};
use crate::error::{Error, Result};
use crate::network::exposure_map;

pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Exhaustive support of a design with exact probabilities.
#[derive(Debug, Clone)]
pub struct SupportTable {
    pub realizations: Vec<AssignmentRealization>,
    pub probabilities: Vec<f64>,
}

impl SupportTable {
    pub fn len(&self) -> usize {
        self.realizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AssignmentRealization, f64)> {
        self.realizations.iter().zip(self.probabilities.iter().cloned())
    }
}

fn multinomial(counts: &[usize]) -> f64 {
    let mut out = 1.0;
    let mut placed = 0usize;
    for &c in counts {
        for j in 1..=c {
            placed += 1;
            out *= placed as f64 / j as f64;
        }
    }
    out.round()
}

/// Number of support points before enumeration (an upper bound for
/// exposure-derived designs, whose distinct exposure vectors may coincide).
pub fn support_size(design: &DesignSpec) -> Result<f64> {
    match design.kind() {
        DesignKind::Bernoulli { probs } => {
            Ok(probs.iter().map(|row| row.iter().filter(|&&p| p > 0.0).count() as f64).product())
        }
        DesignKind::CompletelyRandomized { counts } => Ok(multinomial(counts)),
        DesignKind::Stratified { counts, .. } => Ok(counts.iter().map(|c| multinomial(c)).product()),
        DesignKind::Clustered { cluster_design, .. } => support_size(cluster_design),
        DesignKind::ExposureDerived { base, .. } => support_size(base),
        DesignKind::Custom { .. } => Err(Error::NotEnumerable("custom")),
    }
}

/// Advance to the next lexicographic permutation; false when wrapped.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn multiset_permutations(counts: &[usize]) -> Vec<Vec<usize>> {
    let mut cur = labels_from_counts(counts);
    let mut out = vec![cur.clone()];
    while next_permutation(&mut cur) {
        out.push(cur.clone());
    }
    out
}

fn raw_support(design: &DesignSpec) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = design.n();
    match design.kind() {
        DesignKind::Bernoulli { probs } => {
            let mut out = vec![(Vec::with_capacity(n), 1.0)];
            for row in probs {
                let mut next = Vec::with_capacity(out.len() * row.len());
                for (prefix, p) in &out {
                    for (a, &q) in row.iter().enumerate() {
                        if q > 0.0 {
                            let mut v = prefix.clone();
                            v.push(a);
                            next.push((v, p * q));
                        }
                    }
                }
                out = next;
            }
            Ok(out)
        }
        DesignKind::CompletelyRandomized { counts } => {
            let perms = multiset_permutations(counts);
            let p = 1.0 / perms.len() as f64;
            Ok(perms.into_iter().map(|v| (v, p)).collect())
        }
        DesignKind::Stratified { strata, counts } => {
            let mut out = vec![(vec![0usize; n], 1.0)];
            for (members, c) in strata.iter().zip(counts) {
                let perms = multiset_permutations(c);
                let q = 1.0 / perms.len() as f64;
                let mut next = Vec::with_capacity(out.len() * perms.len());
                for (assign, p) in &out {
                    for perm in &perms {
                        let mut v = assign.clone();
                        for (&u, &a) in members.iter().zip(perm) {
                            v[u] = a;
                        }
                        next.push((v, p * q));
                    }
                }
                out = next;
            }
            Ok(out)
        }
        DesignKind::Clustered { cluster_of, cluster_design } => Ok(raw_support(cluster_design)?
            .into_iter()
            .map(|(cl, p)| (cluster_of.iter().map(|&c| cl[c]).collect(), p))
            .collect()),
        DesignKind::ExposureDerived { base, graph, rules } => {
            let mut merged: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for (z, p) in raw_support(base)? {
                let labels = exposure_map(&z, graph, rules)?;
                *merged.entry(labels).or_insert(0.0) += p;
            }
            Ok(merged.into_iter().collect())
        }
        DesignKind::Custom { .. } => Err(Error::NotEnumerable("custom")),
    }
}

pub fn enumerate_support(design: &DesignSpec, cap: usize) -> Result<SupportTable> {
    let size = support_size(design)?;
    if size > cap as f64 {
        return Err(Error::SupportTooLarge { size, cap });
    }
    let raw = raw_support(design)?;
    let mut realizations = Vec::with_capacity(raw.len());
    let mut probabilities = Vec::with_capacity(raw.len());
    for (arms, p) in raw {
        realizations.push(AssignmentRealization::new(design.k(), arms)?);
        probabilities.push(p);
    }
    Ok(SupportTable { realizations, probabilities })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{draw_rng, Allocation};
    use std::collections::HashMap;

    #[test]
    fn small_supports() {
        let crd = DesignSpec::completely_randomized(2, vec![1, 1]).unwrap();
        let t = enumerate_support(&crd, 100).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.probabilities.iter().all(|&p| p == 0.5));

        let b = DesignSpec::bernoulli(2, vec![0.5, 0.5]).unwrap();
        let t = enumerate_support(&b, 100).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.probabilities.iter().all(|&p| p == 0.25));

        let crd = DesignSpec::completely_randomized(10, vec![4, 6]).unwrap();
        let t = enumerate_support(&crd, 1000).unwrap();
        assert_eq!(t.len(), 210);
        assert!(t.probabilities.iter().all(|&p| (p - 1.0 / 210.0).abs() < 1e-15));
    }

    #[test]
    fn cap_and_custom_errors() {
        let crd = DesignSpec::completely_randomized(10, vec![4, 6]).unwrap();
        assert!(matches!(enumerate_support(&crd, 100), Err(Error::SupportTooLarge { .. })));
        let custom = DesignSpec::custom(2, 2, std::sync::Arc::new(|_: &mut dyn rand::RngCore| vec![0, 1])).unwrap();
        assert!(matches!(enumerate_support(&custom, 100), Err(Error::NotEnumerable(_))));
    }

    #[test]
    fn stratified_support_is_product() {
        let d = DesignSpec::stratified(5, 2, vec![vec![0, 2, 4], vec![1, 3]], &Allocation::Equal).unwrap();
        let t = enumerate_support(&d, 1000).unwrap();
        assert_eq!(t.len(), 3 * 2);
        let total: f64 = t.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut uniq: Vec<_> = t.realizations.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), t.len());
    }

    #[test]
    fn sampler_matches_support_within_three_se() {
        let d = DesignSpec::bernoulli_per_unit(vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.7, 0.3]]).unwrap();
        let t = enumerate_support(&d, 100).unwrap();
        let draws = 1_000_000u64;
        let mut freq: HashMap<Vec<usize>, u64> = HashMap::new();
        for r in 0..draws {
            *freq.entry(d.sample_arms(&mut draw_rng(2, r))).or_default() += 1;
        }
        for (real, p) in t.iter() {
            let f = *freq.get(real.arm_of()).unwrap_or(&0) as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * se + 1e-12, "{real:?} {f} {p}");
        }
    }
}
