//! Experimental designs as distributions over assignment realizations.

mod enumerate;
mod feasibility;

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{exposure_map, ExposureRules, InterferenceGraph};

pub use enumerate::{enumerate_support, support_size, SupportTable, DEFAULT_ENUMERATION_CAP};
pub use feasibility::structural_zeros;

/// One realized assignment: arm index (0-based) for each unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssignmentRealization {
    k: usize,
    arm_of: Vec<usize>,
}

impl AssignmentRealization {
    pub fn new(k: usize, arm_of: Vec<usize>) -> Result<Self> {
        if let Some(bad) = arm_of.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidArgument(format!("arm {bad} outside 0..{k}")));
        }
        Ok(Self { k, arm_of })
    }

    pub fn n(&self) -> usize {
        self.arm_of.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn arm_of(&self) -> &[usize] {
        &self.arm_of
    }

    /// Position of R_{ai} in the stacked arm-major vector.
    pub fn stacked_index(&self, unit: usize) -> usize {
        self.arm_of[unit] * self.n() + unit
    }

    /// Stacked indices of the n observed cells, ordered by unit.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.stacked_index(i)).collect()
    }

    /// Dense kn indicator vector R1.
    pub fn indicator(&self) -> Vec<f64> {
        let n = self.n();
        let mut r = vec![0.0; self.k * n];
        for (i, &a) in self.arm_of.iter().enumerate() {
            r[a * n + i] = 1.0;
        }
        r
    }
}

/// Per-stratum allocation of units to arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum Allocation {
    /// Equal split; leftover units go to the highest arm first, then downwards.
    Equal,
    /// Repeat a label pattern from the left across each stratum.
    Pattern { arms: Vec<usize> },
    /// Explicit per-stratum counts.
    Counts { counts: Vec<Vec<usize>> },
}

pub trait AssignmentSampler: Send + Sync {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<usize>;
}

impl<F> AssignmentSampler for F
where
    F: Fn(&mut dyn RngCore) -> Vec<usize> + Send + Sync,
{
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        self(rng)
    }
}

#[derive(Clone)]
pub enum DesignKind {
    Bernoulli { probs: Vec<Vec<f64>> },
    CompletelyRandomized { counts: Vec<usize> },
    Stratified { strata: Vec<Vec<usize>>, counts: Vec<Vec<usize>> },
    Clustered { cluster_of: Vec<usize>, cluster_design: Box<DesignSpec> },
    ExposureDerived { base: Box<DesignSpec>, graph: Arc<InterferenceGraph>, rules: Arc<ExposureRules> },
    Custom { sampler: Arc<dyn AssignmentSampler> },
}

impl DesignKind {
    pub fn name(&self) -> &'static str {
        match self {
            DesignKind::Bernoulli { .. } => "bernoulli",
            DesignKind::CompletelyRandomized { .. } => "completely_randomized",
            DesignKind::Stratified { .. } => "stratified",
            DesignKind::Clustered { .. } => "clustered",
            DesignKind::ExposureDerived { .. } => "exposure_derived",
            DesignKind::Custom { .. } => "custom",
        }
    }
}

impl fmt::Debug for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignKind::Bernoulli { probs } => f.debug_struct("Bernoulli").field("probs", probs).finish(),
            DesignKind::CompletelyRandomized { counts } => {
                f.debug_struct("CompletelyRandomized").field("counts", counts).finish()
            }
            DesignKind::Stratified { strata, counts } => {
                f.debug_struct("Stratified").field("strata", strata).field("counts", counts).finish()
            }
            DesignKind::Clustered { cluster_of, cluster_design } => f
                .debug_struct("Clustered")
                .field("cluster_of", cluster_of)
                .field("cluster_design", cluster_design)
                .finish(),
            DesignKind::ExposureDerived { base, rules, .. } => {
                f.debug_struct("ExposureDerived").field("base", base).field("exposures", &rules.len()).finish()
            }
            DesignKind::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// A validated assignment mechanism over n units and k arms.
#[derive(Debug, Clone)]
pub struct DesignSpec {
    n: usize,
    k: usize,
    kind: DesignKind,
}

fn check_probability_row(row: &[f64], unit: usize) -> Result<()> {
    for &p in row {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidDesign(format!("probability {p} outside [0,1] for unit {unit}")));
        }
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDesign(format!("probabilities for unit {unit} sum to {s}")));
    }
    Ok(())
}

fn check_partition(groups: &[Vec<usize>], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidDesign(format!("{what} {g} is empty")));
        }
        for &u in members {
            if u >= n {
                return Err(Error::InvalidDesign(format!("{what} {g} names unit {u} outside 0..{n}")));
            }
            if seen[u] {
                return Err(Error::InvalidDesign(format!("unit {u} appears in more than one {what}")));
            }
            seen[u] = true;
        }
    }
    if let Some(u) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidDesign(format!("unit {u} is not covered by any {what}")));
    }
    Ok(())
}

/// Counts for an equal split of `size` units over `k` arms; the r leftover
/// units go to arms k-1, k-2, ... in that order.
pub fn equal_counts(size: usize, k: usize) -> Vec<usize> {
    let mut counts = vec![size / k; k];
    for j in 0..size % k {
        counts[k - 1 - j] += 1;
    }
    counts
}

/// Counts from cycling a label pattern from its left end.
pub fn pattern_counts(size: usize, k: usize, pattern: &[usize]) -> Result<Vec<usize>> {
    if pattern.is_empty() {
        return Err(Error::InvalidDesign("empty allocation pattern".into()));
    }
    let mut counts = vec![0; k];
    for j in 0..size {
        let a = pattern[j % pattern.len()];
        if a >= k {
            return Err(Error::InvalidDesign(format!("pattern arm {a} outside 0..{k}")));
        }
        counts[a] += 1;
    }
    Ok(counts)
}

impl DesignSpec {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> &DesignKind {
        &self.kind
    }

    pub fn kn(&self) -> usize {
        self.n * self.k
    }

    /// Same arm probabilities for every unit.
    pub fn bernoulli(n: usize, probs: Vec<f64>) -> Result<Self> {
        Self::bernoulli_per_unit(vec![probs; n])
    }

    pub fn bernoulli_per_unit(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n = probs.len();
        if n == 0 {
            return Err(Error::InvalidDesign("no units".into()));
        }
        let k = probs[0].len();
        if k == 0 {
            return Err(Error::InvalidDesign("no arms".into()));
        }
        for (i, row) in probs.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidDesign(format!("unit {i} has {} arm probabilities, expected {k}", row.len())));
            }
            check_probability_row(row, i)?;
        }
        Ok(Self { n, k, kind: DesignKind::Bernoulli { probs } })
    }

    pub fn completely_randomized(n: usize, counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidDesign("no arms".into()));
        }
        let total: usize = counts.iter().sum();
        if total != n {
            return Err(Error::InvalidDesign(format!("arm counts sum to {total}, expected {n}")));
        }
        Ok(Self { n, k: counts.len(), kind: DesignKind::CompletelyRandomized { counts } })
    }

    pub fn stratified(n: usize, k: usize, strata: Vec<Vec<usize>>, allocation: &Allocation) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDesign("no arms".into()));
        }
        check_partition(&strata, n, "stratum")?;
        let counts = match allocation {
            Allocation::Equal => strata.iter().map(|s| equal_counts(s.len(), k)).collect(),
            Allocation::Pattern { arms } => {
                strata.iter().map(|s| pattern_counts(s.len(), k, arms)).collect::<Result<Vec<_>>>()?
            }
            Allocation::Counts { counts } => {
                if counts.len() != strata.len() {
                    return Err(Error::InvalidDesign("one count vector per stratum required".into()));
                }
                for (s, c) in strata.iter().zip(counts) {
                    if c.len() != k || c.iter().sum::<usize>() != s.len() {
                        return Err(Error::InvalidDesign(format!(
                            "stratum counts {c:?} do not split {} units over {k} arms",
                            s.len()
                        )));
                    }
                }
                counts.clone()
            }
        };
        Ok(Self { n, k, kind: DesignKind::Stratified { strata, counts } })
    }

    pub fn clustered(cluster_of: Vec<usize>, cluster_design: DesignSpec) -> Result<Self> {
        let g = cluster_design.n;
        let mut used = vec![false; g];
        for &c in &cluster_of {
            if c >= g {
                return Err(Error::InvalidDesign(format!("cluster {c} outside 0..{g}")));
            }
            used[c] = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::InvalidDesign(format!("cluster {c} has no units")));
        }
        Ok(Self {
            n: cluster_of.len(),
            k: cluster_design.k,
            kind: DesignKind::Clustered { cluster_of, cluster_design: Box::new(cluster_design) },
        })
    }

    pub fn custom(n: usize, k: usize, sampler: Arc<dyn AssignmentSampler>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidDesign("custom design needs n > 0 and k > 0".into()));
        }
        Ok(Self { n, k, kind: DesignKind::Custom { sampler } })
    }

    pub(crate) fn exposure_derived(
        base: DesignSpec,
        graph: Arc<InterferenceGraph>,
        rules: Arc<ExposureRules>,
    ) -> Result<Self> {
        if graph.n() != base.n {
            return Err(Error::InvalidDesign(format!("graph has {} nodes, base design {} units", graph.n(), base.n)));
        }
        if rules.base_arms() != base.k {
            return Err(Error::InvalidDesign(format!(
                "rules expect {} base arms, base design has {}",
                rules.base_arms(),
                base.k
            )));
        }
        Ok(Self { n: base.n, k: rules.len(), kind: DesignKind::ExposureDerived { base: Box::new(base), graph, rules } })
    }

    /// Draw one assignment (arm index per unit).
    pub fn sample_arms(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        match &self.kind {
            DesignKind::Bernoulli { probs } => probs
                .iter()
                .map(|row| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut last = 0;
                    for (a, &p) in row.iter().enumerate() {
                        if p > 0.0 {
                            last = a;
                            acc += p;
                            if u < acc {
                                return a;
                            }
                        }
                    }
                    last
                })
                .collect(),
            DesignKind::CompletelyRandomized { counts } => {
                let mut labels = labels_from_counts(counts);
                labels.shuffle(rng);
                labels
            }
            DesignKind::Stratified { strata, counts } => {
                let mut arms = vec![0; self.n];
                for (members, c) in strata.iter().zip(counts) {
                    let mut labels = labels_from_counts(c);
                    labels.shuffle(rng);
                    for (&u, a) in members.iter().zip(labels) {
                        arms[u] = a;
                    }
                }
                arms
            }
            DesignKind::Clustered { cluster_of, cluster_design } => {
                let cl = cluster_design.sample_arms(rng);
                cluster_of.iter().map(|&c| cl[c]).collect()
            }
            DesignKind::ExposureDerived { base, graph, rules } => {
                let z = base.sample_arms(rng);
                exposure_map(&z, graph, rules).expect("exposure rules validated at construction")
            }
            DesignKind::Custom { sampler } => sampler.sample(rng),
        }
    }
}

fn labels_from_counts(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(a, &c)| std::iter::repeat_n(a, c)).collect()
}

/// RNG stream for draw `index` under `seed`; independent of worker layout.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample one realization, validating custom sampler output.
pub fn sample_assignment(design: &DesignSpec, rng: &mut dyn RngCore) -> Result<AssignmentRealization> {
    let arms = design.sample_arms(rng);
    if arms.len() != design.n {
        return Err(Error::InvalidDesign(format!("sampler returned {} labels for {} units", arms.len(), design.n)));
    }
    AssignmentRealization::new(design.k, arms)
}

/// Structured design description, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DesignConfig {
    Bernoulli {
        n: usize,
        probs: Vec<f64>,
    },
    CompletelyRandomized {
        n: usize,
        counts: Vec<usize>,
    },
    Stratified {
        n: usize,
        k: usize,
        /// Stratum id per unit; ignored when `strata_csv` is used by the caller.
        #[serde(default)]
        stratum_of: Vec<usize>,
        allocation: Allocation,
    },
    Clustered {
        cluster_of: Vec<usize>,
        cluster_design: Box<DesignConfig>,
    },
}

/// Groups listed by id, in increasing id order.
pub fn groups_from_labels(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.iter().map(|&g| (0..labels.len()).filter(|&i| labels[i] == g).collect()).collect()
}

pub fn build_design(cfg: &DesignConfig) -> Result<DesignSpec> {
    match cfg {
        DesignConfig::Bernoulli { n, probs } => DesignSpec::bernoulli(*n, probs.clone()),
        DesignConfig::CompletelyRandomized { n, counts } => DesignSpec::completely_randomized(*n, counts.clone()),
        DesignConfig::Stratified { n, k, stratum_of, allocation } => {
            if stratum_of.len() != *n {
                return Err(Error::InvalidDesign(format!("{} stratum labels for {n} units", stratum_of.len())));
            }
            DesignSpec::stratified(*n, *k, groups_from_labels(stratum_of), allocation)
        }
        DesignConfig::Clustered { cluster_of, cluster_design } => {
            let inner = build_design(cluster_design)?;
            DesignSpec::clustered(cluster_of.clone(), inner)
        }
    }
}
