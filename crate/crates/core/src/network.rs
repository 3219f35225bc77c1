//! Interference graphs, exposure mappings and exposure-level designs.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{draw_rng, DesignSpec};
use crate::error::{Error, Result};
use crate::moments::DesignMoments;

/// Directed nomination graph with self-loops and repeated edges removed.
#[derive(Debug, Clone)]
pub struct InterferenceGraph {
    out: Vec<Vec<usize>>,
    undirected: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

impl InterferenceGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut out = vec![Vec::new(); n];
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::InvalidArgument(format!("edge ({s},{d}) outside 0..{n}")));
            }
            if s != d {
                out[s].push(d);
            }
        }
        let mut undirected = vec![Vec::new(); n];
        let mut clean = Vec::new();
        for (s, list) in out.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            for &d in list.iter() {
                clean.push((s, d));
                undirected[s].push(d);
                undirected[d].push(s);
            }
        }
        for list in undirected.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { out, undirected, edges: clean })
    }

    pub fn n(&self) -> usize {
        self.out.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn neighbors(&self, i: usize, mode: NeighborMode) -> &[usize] {
        match mode {
            NeighborMode::Out => &self.out[i],
            NeighborMode::Undirected => &self.undirected[i],
        }
    }

    pub fn max_degree(&self, mode: NeighborMode) -> usize {
        (0..self.n()).map(|i| self.neighbors(i, mode).len()).max().unwrap_or(0)
    }

    /// Connected component label per node, treating edges as undirected.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            label[s] = next;
            while let Some(u) = stack.pop() {
                for &v in &self.undirected[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Self::from_edges(self.n(), &edges)
    }
}

/// Synthetic nomination graph: node i names a uniform number of distinct
/// others in [min_degree, max_degree], drawn from the stream (seed, 0).
pub fn random_out_graph(n: usize, min_degree: usize, max_degree: usize, seed: u64) -> Result<InterferenceGraph> {
    if min_degree > max_degree || (n > 0 && max_degree >= n) {
        return Err(Error::InvalidArgument(format!("degrees {min_degree}..={max_degree} impossible on {n} nodes")));
    }
    let mut rng = draw_rng(seed, 0);
    let mut edges = Vec::new();
    for i in 0..n {
        let degree = rng.random_range(min_degree..=max_degree);
        for j in sample(&mut rng, n - 1, degree) {
            edges.push((i, if j >= i { j + 1 } else { j }));
        }
    }
    InterferenceGraph::from_edges(n, &edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Nodes the unit nominated.
    #[default]
    Out,
    /// Nominated or nominating nodes.
    Undirected,
}

/// Closed interval on a neighbor count; `max = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountInterval {
    pub arm: usize,
    #[serde(default)]
    pub min: usize,
    #[serde(default)]
    pub max: Option<usize>,
}

impl CountInterval {
    fn contains(&self, count: usize) -> bool {
        count >= self.min && self.max.is_none_or(|m| count <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureDef {
    pub name: String,
    pub own_arms: Vec<usize>,
    #[serde(default)]
    pub counts: Vec<CountInterval>,
}

impl ExposureDef {
    fn matches(&self, own: usize, counts: &[usize]) -> bool {
        self.own_arms.contains(&own) && self.counts.iter().all(|c| c.contains(counts[c.arm]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRules {
    base_arms: usize,
    #[serde(default)]
    neighborhood: NeighborMode,
    exposures: Vec<ExposureDef>,
}

impl ExposureRules {
    pub fn new(base_arms: usize, neighborhood: NeighborMode, exposures: Vec<ExposureDef>) -> Result<Self> {
        if exposures.is_empty() {
            return Err(Error::Rules("no exposures defined".into()));
        }
        for e in &exposures {
            if e.own_arms.iter().any(|&a| a >= base_arms) || e.counts.iter().any(|c| c.arm >= base_arms) {
                return Err(Error::Rules(format!("exposure `{}` names a base arm outside 0..{base_arms}", e.name)));
            }
        }
        Ok(Self { base_arms, neighborhood, exposures })
    }

    /// Four exposures from own treatment and whether any neighbor is treated:
    /// treated with treated neighbor, treated without, control with, control without.
    pub fn direct_and_spillover(treated_arm: usize, neighborhood: NeighborMode) -> Self {
        let control = 1 - treated_arm;
        let any = |min, max| vec![CountInterval { arm: treated_arm, min, max }];
        let defs = vec![
            ExposureDef { name: "d11".into(), own_arms: vec![treated_arm], counts: any(1, None) },
            ExposureDef { name: "d10".into(), own_arms: vec![treated_arm], counts: any(0, Some(0)) },
            ExposureDef { name: "d01".into(), own_arms: vec![control], counts: any(1, None) },
            ExposureDef { name: "d00".into(), own_arms: vec![control], counts: any(0, Some(0)) },
        ];
        Self::new(2, neighborhood, defs).expect("built-in rules are well formed")
    }

    /// Twelve exposures over four base arms (first-round simple, first-round
    /// intensive, second-round simple, second-round intensive), split by how
    /// many first-round friends a second-round unit has in each session.
    pub fn two_round_sessions(neighborhood: NeighborMode) -> Self {
        let (frs, fri, srs, sri) = (0, 1, 2, 3);
        let iv = |arm, min, max| CountInterval { arm, min, max };
        let mut defs = vec![
            ExposureDef { name: "frs".into(), own_arms: vec![frs], counts: vec![] },
            ExposureDef { name: "fri".into(), own_arms: vec![fri], counts: vec![] },
        ];
        for (tag, own) in [("srs", srs), ("sri", sri)] {
            defs.push(ExposureDef {
                name: format!("{tag}_no_first_round"),
                own_arms: vec![own],
                counts: vec![iv(frs, 0, Some(0)), iv(fri, 0, Some(0))],
            });
            defs.push(ExposureDef {
                name: format!("{tag}_simple_only"),
                own_arms: vec![own],
                counts: vec![iv(frs, 1, None), iv(fri, 0, Some(0))],
            });
            defs.push(ExposureDef { name: format!("{tag}_intensive_1"), own_arms: vec![own], counts: vec![iv(fri, 1, Some(1))] });
            defs.push(ExposureDef { name: format!("{tag}_intensive_2"), own_arms: vec![own], counts: vec![iv(fri, 2, Some(2))] });
            defs.push(ExposureDef { name: format!("{tag}_intensive_3plus"), own_arms: vec![own], counts: vec![iv(fri, 3, None)] });
        }
        Self::new(4, neighborhood, defs).expect("built-in rules are well formed")
    }

    pub fn len(&self) -> usize {
        self.exposures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exposures.is_empty()
    }

    pub fn base_arms(&self) -> usize {
        self.base_arms
    }

    pub fn neighborhood(&self) -> NeighborMode {
        self.neighborhood
    }

    pub fn with_neighborhood(mut self, mode: NeighborMode) -> Self {
        self.neighborhood = mode;
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.exposures.iter().map(|e| e.name.clone()).collect()
    }

    /// Exposure index for an own arm and per-arm neighbor counts.
    pub fn classify(&self, own: usize, counts: &[usize]) -> Result<usize> {
        let mut found: Option<usize> = None;
        for (idx, e) in self.exposures.iter().enumerate() {
            if e.matches(own, counts) {
                if let Some(prev) = found {
                    return Err(Error::Rules(format!(
                        "exposures `{}` and `{}` overlap at own arm {own}, counts {counts:?}",
                        self.exposures[prev].name, e.name
                    )));
                }
                found = Some(idx);
            }
        }
        found.ok_or_else(|| Error::Rules(format!("no exposure matches own arm {own}, counts {counts:?}")))
    }

    /// Check exhaustiveness and exclusivity for every profile up to `max_degree` neighbors.
    pub fn validate(&self, max_degree: usize) -> Result<()> {
        let m = self.base_arms;
        for d in 0..=max_degree {
            let mut counts = vec![0usize; m];
            counts[0] = d;
            loop {
                for own in 0..m {
                    self.classify(own, &counts)?;
                }
                if !next_composition(&mut counts) {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Step through all ways of writing the current total as m ordered parts.
fn next_composition(c: &mut [usize]) -> bool {
    let m = c.len();
    if m < 2 {
        return false;
    }
    // find the rightmost nonzero entry before the last position
    let mut i = m - 1;
    loop {
        if i == 0 {
            return false;
        }
        i -= 1;
        if c[i] > 0 {
            break;
        }
    }
    let tail = c[m - 1];
    c[m - 1] = 0;
    c[i] -= 1;
    c[i + 1] = tail + 1;
    true
}

/// Exposure label for every unit under base assignment `z`.
pub fn exposure_map(z: &[usize], graph: &InterferenceGraph, rules: &ExposureRules) -> Result<Vec<usize>> {
    if z.len() != graph.n() {
        return Err(Error::Dimension(format!("{} labels for a {}-node graph", z.len(), graph.n())));
    }
    let mut counts = vec![0usize; rules.base_arms];
    (0..z.len())
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for &j in graph.neighbors(i, rules.neighborhood) {
                counts[z[j]] += 1;
            }
            rules.classify(z[i], &counts)
        })
        .collect()
}

/// Design over exposures induced by a base design through a graph.
pub fn derive_exposure_design(base: DesignSpec, graph: Arc<InterferenceGraph>, rules: Arc<ExposureRules>) -> Result<DesignSpec> {
    rules.validate(graph.max_degree(rules.neighborhood))?;
    DesignSpec::exposure_derived(base, graph, rules)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PositivityEntry {
    pub unit: usize,
    pub arm: usize,
    pub pi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PositivityReport {
    pub threshold: f64,
    pub zero: Vec<PositivityEntry>,
    pub small: Vec<PositivityEntry>,
}

impl PositivityReport {
    pub fn is_clean(&self) -> bool {
        self.zero.is_empty() && self.small.is_empty()
    }
}

pub const DEFAULT_POSITIVITY_THRESHOLD: f64 = 0.01;

/// Cells with zero or small inclusion probability.
pub fn positivity_report(moments: &DesignMoments, threshold: f64) -> PositivityReport {
    let n = moments.n();
    let mut report = PositivityReport { threshold, ..Default::default() };
    for (idx, &p) in moments.pi.iter().enumerate() {
        let entry = PositivityEntry { unit: idx % n, arm: idx / n, pi: p };
        if p == 0.0 || moments.zero_mask[idx] {
            report.zero.push(entry);
        } else if p < threshold {
            report.small.push(entry);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> InterferenceGraph {
        InterferenceGraph::from_edges(3, &[(0, 1), (1, 2), (1, 0), (2, 1)]).unwrap()
    }

    #[test]
    fn random_graph_degrees_in_range() {
        let g = random_out_graph(200, 2, 3, 9).unwrap();
        for i in 0..200 {
            let d = g.out_neighbors(i).len();
            assert!((2..=3).contains(&d) && !g.out_neighbors(i).contains(&i));
        }
        assert_eq!(g.edges(), random_out_graph(200, 2, 3, 9).unwrap().edges());
        assert!(random_out_graph(3, 1, 3, 0).is_err());
    }

    #[test]
    fn graph_cleaning() {
        let g = InterferenceGraph::from_edges(3, &[(0, 1), (0, 1), (1, 1), (2, 0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (2, 0)]);
        assert_eq!(g.neighbors(0, NeighborMode::Out), &[1]);
        assert_eq!(g.neighbors(0, NeighborMode::Undirected), &[1, 2]);
    }

    #[test]
    fn treated_with_treated_neighbor() {
        let rules = ExposureRules::direct_and_spillover(1, NeighborMode::Out);
        let g = path3();
        // unit 1 treated, neighbor 0 treated
        let e = exposure_map(&[1, 1, 0], &g, &rules).unwrap();
        assert_eq!(e[1], 0);
        assert_eq!(e[0], 0);
        assert_eq!(e[2], 2);
    }

    #[test]
    fn isolated_untreated_unit_is_d00() {
        let rules = ExposureRules::direct_and_spillover(1, NeighborMode::Out);
        let g = InterferenceGraph::from_edges(2, &[(0, 1)]).unwrap();
        let e = exposure_map(&[1, 0], &g, &rules).unwrap();
        assert_eq!(e[1], 3);
        assert_eq!(e[0], 1);
    }

    #[test]
    fn two_round_rules_hand_count() {
        let rules = ExposureRules::two_round_sessions(NeighborMode::Out);
        rules.validate(8).unwrap();
        // unit 0 is second-round simple and nominated 1..4
        let g = InterferenceGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        // two friends in first-round intensive, one in first-round simple
        let z = [2, 1, 1, 0, 3];
        let e = exposure_map(&z, &g, &rules).unwrap();
        assert_eq!(rules.names()[e[0]], "srs_intensive_2");
        assert_eq!(rules.names()[e[4]], "sri_no_first_round");
        assert_eq!(rules.names()[e[1]], "fri");
        let z = [3, 0, 0, 2, 3];
        let e = exposure_map(&z, &g, &rules).unwrap();
        assert_eq!(rules.names()[e[0]], "sri_simple_only");
    }

    #[test]
    fn overlapping_and_gappy_rules_fail_validation() {
        let iv = |min, max| vec![CountInterval { arm: 1, min, max }];
        let overlapping = ExposureRules::new(
            2,
            NeighborMode::Out,
            vec![
                ExposureDef { name: "a".into(), own_arms: vec![0, 1], counts: iv(0, None) },
                ExposureDef { name: "b".into(), own_arms: vec![1], counts: iv(1, None) },
            ],
        )
        .unwrap();
        assert!(overlapping.validate(2).is_err());
        let gappy = ExposureRules::new(
            2,
            NeighborMode::Out,
            vec![ExposureDef { name: "a".into(), own_arms: vec![0, 1], counts: iv(0, Some(1)) }],
        )
        .unwrap();
        assert!(gappy.validate(1).is_ok());
        assert!(gappy.validate(2).is_err());
    }

    #[test]
    fn compositions_are_complete() {
        let mut c = vec![3, 0, 0];
        let mut seen = 1;
        while next_composition(&mut c) {
            assert_eq!(c.iter().sum::<usize>(), 3);
            seen += 1;
        }
        assert_eq!(seen, 10);
    }
}
