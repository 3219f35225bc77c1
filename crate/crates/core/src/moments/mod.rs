//! Design moments: inclusion probabilities, joint inclusion matrix and the
//! first-order design matrix, exact or simulated.

mod local;
pub mod spectral;
pub mod tensor;
pub mod welford;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{draw_rng, enumerate_support, structural_zeros, DesignKind, DesignSpec, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};

pub use spectral::{complexity, complexity_table, largest_eigenvalue, SpectralResult};
pub use tensor::{
    second_order_tensor, tensor_sigma_max_oracle, tensor_slice_norm_bound, weighted_tensor, SecondOrderTensor,
};
use welford::{tree_merge, WelfordCov};

/// Vectors up to this length use the dense Welford accumulator in Monte Carlo;
/// longer ones count joint hits directly.
pub const WELFORD_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum MomentMethod {
    Exact,
    MonteCarlo { reps: u64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct DesignMoments {
    n: usize,
    k: usize,
    pub pi: DVector<f64>,
    pub p: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub method: MomentMethod,
    /// Cells with zero (estimated or known) inclusion probability.
    pub zero_mask: Vec<bool>,
    /// Subset of `zero_mask` the design provably never realizes.
    pub proven_zero: Vec<bool>,
}

/// First-order design matrix from inclusion and joint inclusion probabilities;
/// rows and columns of zero-probability cells are left at 0.
pub fn design_matrix_from_joint(pi: &DVector<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let kn = pi.len();
    DMatrix::from_fn(kn, kn, |u, v| if pi[u] > 0.0 && pi[v] > 0.0 { p[(u, v)] / (pi[u] * pi[v]) - 1.0 } else { 0.0 })
}

impl DesignMoments {
    pub fn from_joint(
        n: usize,
        k: usize,
        pi: DVector<f64>,
        p: DMatrix<f64>,
        method: MomentMethod,
        proven_zero: Option<Vec<bool>>,
    ) -> Result<Self> {
        let kn = n * k;
        if pi.len() != kn || p.shape() != (kn, kn) {
            return Err(Error::Dimension(format!("moments for n={n}, k={k} need length {kn}")));
        }
        let d = design_matrix_from_joint(&pi, &p);
        let zero_mask: Vec<bool> = pi.iter().map(|&x| x == 0.0).collect();
        let proven_zero = match (method, proven_zero) {
            (MomentMethod::Exact, _) => zero_mask.clone(),
            (_, Some(z)) => z.iter().zip(&zero_mask).map(|(a, b)| *a && *b).collect(),
            (_, None) => vec![false; kn],
        };
        Ok(Self { n, k, pi, p, d, method, zero_mask, proven_zero })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kn(&self) -> usize {
        self.n * self.k
    }

    /// Stacked indices of every cell in the listed arms.
    pub fn arm_indices(&self, arms: &[usize]) -> Vec<usize> {
        arms.iter().flat_map(|&a| (a * self.n)..((a + 1) * self.n)).collect()
    }

    pub fn pi_of(&self, arm: usize, unit: usize) -> f64 {
        self.pi[arm * self.n + unit]
    }
}

/// Moments from full enumeration of the design's support.
pub fn exact_moments(design: &DesignSpec) -> Result<DesignMoments> {
    exact_moments_with_cap(design, DEFAULT_ENUMERATION_CAP)
}

pub fn exact_moments_with_cap(design: &DesignSpec, cap: usize) -> Result<DesignMoments> {
    let support = enumerate_support(design, cap)?;
    let kn = design.kn();
    let mut pi = DVector::zeros(kn);
    let mut p = DMatrix::zeros(kn, kn);
    for (real, prob) in support.iter() {
        let act = real.active_indices();
        for &u in &act {
            pi[u] += prob;
            for &v in &act {
                p[(u, v)] += prob;
            }
        }
    }
    DesignMoments::from_joint(design.n(), design.k(), pi, p, MomentMethod::Exact, None)
}

fn crd_joint(n: usize, counts: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let k = counts.len();
    let nf = n as f64;
    let pi = DVector::from_fn(k * n, |u, _| counts[u / n] as f64 / nf);
    let p = DMatrix::from_fn(k * n, k * n, |u, v| {
        let (a, i) = (u / n, u % n);
        let (b, j) = (v / n, v % n);
        if i == j {
            if a == b {
                counts[a] as f64 / nf
            } else {
                0.0
            }
        } else {
            let cb = counts[b] as f64 - if a == b { 1.0 } else { 0.0 };
            counts[a] as f64 * cb / (nf * (nf - 1.0))
        }
    });
    (pi, p)
}

fn closed_form_joint(design: &DesignSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = design.n();
    let k = design.k();
    let kn = n * k;
    match design.kind() {
        DesignKind::Bernoulli { probs } => {
            let pi = DVector::from_fn(kn, |u, _| probs[u % n][u / n]);
            let p = DMatrix::from_fn(kn, kn, |u, v| {
                if u % n == v % n {
                    if u == v {
                        pi[u]
                    } else {
                        0.0
                    }
                } else {
                    pi[u] * pi[v]
                }
            });
            Ok((pi, p))
        }
        DesignKind::CompletelyRandomized { counts } => Ok(crd_joint(n, counts)),
        DesignKind::Stratified { strata, counts } => {
            let mut stratum = vec![0usize; n];
            let mut pos = vec![0usize; n];
            let mut local = Vec::new();
            for (s, members) in strata.iter().enumerate() {
                for (idx, &u) in members.iter().enumerate() {
                    stratum[u] = s;
                    pos[u] = idx;
                }
                local.push(crd_joint(members.len(), &counts[s]));
            }
            let pi = DVector::from_fn(kn, |u, _| {
                let (a, i) = (u / n, u % n);
                let (lp, _) = &local[stratum[i]];
                lp[a * strata[stratum[i]].len() + pos[i]]
            });
            let p = DMatrix::from_fn(kn, kn, |u, v| {
                let (a, i) = (u / n, u % n);
                let (b, j) = (v / n, v % n);
                if stratum[i] == stratum[j] {
                    let s = stratum[i];
                    let m = strata[s].len();
                    local[s].1[(a * m + pos[i], b * m + pos[j])]
                } else {
                    pi[u] * pi[v]
                }
            });
            Ok((pi, p))
        }
        DesignKind::Clustered { cluster_of, cluster_design } => {
            let g = cluster_design.n();
            let (cpi, cp) = closed_form_joint(cluster_design)?;
            let pi = DVector::from_fn(kn, |u, _| cpi[(u / n) * g + cluster_of[u % n]]);
            let p = DMatrix::from_fn(kn, kn, |u, v| {
                cp[((u / n) * g + cluster_of[u % n], (v / n) * g + cluster_of[v % n])]
            });
            Ok((pi, p))
        }
        DesignKind::ExposureDerived { base, graph, rules } => match base.kind() {
            DesignKind::Bernoulli { probs } => local::exposure_joint(probs, graph, rules),
            _ => Err(Error::NotEnumerable("exposure design over a dependent base")),
        },
        DesignKind::Custom { .. } => Err(Error::NotEnumerable("custom")),
    }
}

/// Exact moments from closed forms (independent, completely randomized,
/// stratified and clustered designs) or from local enumeration (exposure
/// designs over independent unit assignments). No support cap applies.
pub fn closed_form_moments(design: &DesignSpec) -> Result<DesignMoments> {
    let (pi, p) = closed_form_joint(design)?;
    DesignMoments::from_joint(design.n(), design.k(), pi, p, MomentMethod::Exact, None)
}

/// Exact moments when available (enumeration, then closed form), else Monte Carlo.
pub fn moments_auto(design: &DesignSpec, mc_reps: u64, seed: u64) -> Result<DesignMoments> {
    match exact_moments(design) {
        Ok(m) => return Ok(m),
        Err(Error::SupportTooLarge { .. }) | Err(Error::NotEnumerable(_)) => {}
        Err(e) => return Err(e),
    }
    match closed_form_moments(design) {
        Ok(m) => Ok(m),
        Err(Error::NotEnumerable(_)) => mc_moments(design, mc_reps, seed),
        Err(e) => Err(e),
    }
}

fn chunk_ranges(reps: u64, chunk: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < reps {
        let end = (start + chunk).min(reps);
        out.push((start, end));
        start = end;
    }
    out
}

/// Monte Carlo moments over `reps` draws; the result depends only on
/// (design, reps, seed), never on the thread count.
pub fn mc_moments(design: &DesignSpec, reps: u64, seed: u64) -> Result<DesignMoments> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!("Monte Carlo needs at least 2 draws, got {reps}")));
    }
    let n = design.n();
    let kn = design.kn();
    let (pi, p) = if kn <= WELFORD_MAX_DIM { mc_welford(design, reps, seed) } else { mc_counts(design, reps, seed) };
    if pi.len() != kn {
        return Err(Error::InvalidDesign("sampler output has the wrong length".into()));
    }
    DesignMoments::from_joint(n, design.k(), pi, p, MomentMethod::MonteCarlo { reps, seed }, structural_zeros(design))
}

fn mc_welford(design: &DesignSpec, reps: u64, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let kn = design.kn();
    let n = design.n();
    let chunk = 1024.max(reps.div_ceil(64));
    let parts: Vec<WelfordCov> = chunk_ranges(reps, chunk)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut acc = WelfordCov::new(kn);
            let mut x = vec![0.0; kn];
            for r in lo..hi {
                let arms = design.sample_arms(&mut draw_rng(seed, r));
                x.iter_mut().for_each(|v| *v = 0.0);
                for (i, &a) in arms.iter().enumerate() {
                    x[a * n + i] = 1.0;
                }
                acc.push(&x);
            }
            acc
        })
        .collect();
    let acc = tree_merge(parts).expect("at least one chunk");
    let mean = acc.mean().clone();
    let cov = acc.covariance();
    let r = reps as f64;
    let pi = mean.map(|m| (m * r).round() / r);
    let p = DMatrix::from_fn(kn, kn, |u, v| ((cov[(u, v)] + mean[u] * mean[v]) * r).round() / r);
    (pi, p)
}

fn mc_counts(design: &DesignSpec, reps: u64, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let kn = design.kn();
    let n = design.n();
    let parts = (rayon::current_num_threads() as u64).clamp(1, reps);
    let ranges = chunk_ranges(reps, reps.div_ceil(parts));
    let counts = ranges
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut counts = vec![0u32; kn * kn];
            let mut act = vec![0usize; n];
            for r in lo..hi {
                let arms = design.sample_arms(&mut draw_rng(seed, r));
                for (i, &a) in arms.iter().enumerate() {
                    act[i] = a * n + i;
                }
                act.sort_unstable();
                for (x, &u) in act.iter().enumerate() {
                    let row = &mut counts[u * kn..(u + 1) * kn];
                    for &v in &act[x..] {
                        row[v] += 1;
                    }
                }
            }
            counts
        })
        .reduce_with(|mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        })
        .expect("at least one range");
    let r = reps as f64;
    let pi = DVector::from_fn(kn, |u, _| counts[u * kn + u] as f64 / r);
    let p = DMatrix::from_fn(kn, kn, |u, v| {
        let (a, b) = if u <= v { (u, v) } else { (v, u) };
        counts[a * kn + b] as f64 / r
    });
    (pi, p)
}

/// Two-arm completely randomized first-order design matrix, arm-major with
/// the n_t-unit arm first.
pub fn crd_first_order_matrix(n: usize, n_t: usize) -> Result<DMatrix<f64>> {
    if n_t == 0 || n_t >= n {
        return Err(Error::InvalidArgument(format!("need 0 < n_t < n, got n_t={n_t}, n={n}")));
    }
    let n_c = n - n_t;
    let a = demeaning_block(n);
    let mut d = DMatrix::zeros(2 * n, 2 * n);
    d.view_mut((0, 0), (n, n)).copy_from(&(&a * (n_c as f64 / n_t as f64)));
    d.view_mut((0, n), (n, n)).copy_from(&(-&a));
    d.view_mut((n, 0), (n, n)).copy_from(&(-&a));
    d.view_mut((n, n), (n, n)).copy_from(&(&a * (n_t as f64 / n_c as f64)));
    Ok(d)
}

/// (n/(n-1)) (I - J/n)
pub fn demeaning_block(n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    DMatrix::from_fn(n, n, |i, j| {
        let centered = if i == j { 1.0 - 1.0 / nf } else { -1.0 / nf };
        centered * nf / (nf - 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Allocation;
    use crate::linalg::sym_eigenvalues;

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn two_unit_crd_matrix() {
        let m = exact_moments(&DesignSpec::completely_randomized(2, vec![1, 1]).unwrap()).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            1.0, -1.0, -1.0, 1.0,
            -1.0, 1.0, 1.0, -1.0,
            -1.0, 1.0, 1.0, -1.0,
            1.0, -1.0, -1.0, 1.0,
        ]);
        assert!(max_diff(&m.d, &expected) < 1e-12);
        assert!(max_diff(&crd_first_order_matrix(2, 1).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn single_bernoulli_unit() {
        let m = exact_moments(&DesignSpec::bernoulli(1, vec![0.5, 0.5]).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(max_diff(&m.d, &expected) < 1e-12);
    }

    #[test]
    fn certain_cell_has_zero_row() {
        let d = DesignSpec::bernoulli_per_unit(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let m = exact_moments(&d).unwrap();
        assert!(m.d.row(0).iter().all(|v| v.abs() < 1e-15));
        assert!(m.zero_mask[2]);
        assert!(m.proven_zero[2]);
    }

    #[test]
    fn four_unit_crd_entries() {
        let d = crd_first_order_matrix(4, 2).unwrap();
        assert!((d[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((d[(0, 1)] + 1.0 / 3.0).abs() < 1e-15);
        assert!(crd_first_order_matrix(4, 0).is_err());
        assert!(crd_first_order_matrix(4, 4).is_err());
    }

    #[test]
    fn crd_rows_sum_to_zero_and_psd() {
        for (n, nt) in [(5, 2), (6, 3), (7, 1)] {
            let m = exact_moments(&DesignSpec::completely_randomized(n, vec![nt, n - nt]).unwrap()).unwrap();
            for r in 0..2 * n {
                assert!(m.d.row(r).sum().abs() < 1e-10);
            }
            assert!(sym_eigenvalues(&m.d)[0] >= -1e-8);
        }
    }

    #[test]
    fn closed_forms_match_enumeration() {
        let designs = vec![
            DesignSpec::bernoulli_per_unit(vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.5, 0.0], vec![0.1, 0.1, 0.8]]).unwrap(),
            DesignSpec::completely_randomized(6, vec![1, 2, 3]).unwrap(),
            DesignSpec::stratified(7, 3, vec![vec![0, 3, 5, 6], vec![1, 2, 4]], &Allocation::Equal).unwrap(),
            DesignSpec::clustered(vec![0, 0, 1, 2, 1], DesignSpec::completely_randomized(3, vec![1, 2]).unwrap())
                .unwrap(),
        ];
        for d in designs {
            let e = exact_moments(&d).unwrap();
            let c = closed_form_moments(&d).unwrap();
            assert!((&e.pi - &c.pi).abs().max() < 1e-12);
            assert!(max_diff(&e.p, &c.p) < 1e-12);
            assert!(max_diff(&e.d, &c.d) < 1e-10);
        }
    }

    #[test]
    fn monte_carlo_close_to_exact() {
        let d = DesignSpec::completely_randomized(2, vec![1, 1]).unwrap();
        let e = exact_moments(&d).unwrap();
        let m = mc_moments(&d, 100_000, 3).unwrap();
        assert!(max_diff(&e.d, &m.d) < 0.05);

        let b = DesignSpec::bernoulli(3, vec![0.5, 0.5]).unwrap();
        let m = mc_moments(&b, 100_000, 4).unwrap();
        assert!(m.pi.iter().all(|p| (p - 0.5).abs() < 0.01));
        assert!(mc_moments(&b, 1, 4).is_err());
    }

    #[test]
    fn welford_and_count_paths_agree() {
        let d = DesignSpec::completely_randomized(5, vec![2, 3]).unwrap();
        let (pw, jw) = mc_welford(&d, 5000, 8);
        let (pc, jc) = mc_counts(&d, 5000, 8);
        assert!((&pw - &pc).abs().max() < 1e-12);
        assert!(max_diff(&jw, &jc) < 1e-12);
    }

    #[test]
    fn monte_carlo_is_thread_count_invariant() {
        let d = DesignSpec::bernoulli(6, vec![0.3, 0.7]).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_moments(&d, 20_000, 12).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.d.as_slice(), b.d.as_slice());
        assert_eq!(a.p.as_slice(), b.p.as_slice());
    }

    #[test]
    fn zero_hits_are_recorded_as_zero() {
        let d = DesignSpec::completely_randomized(3, vec![1, 2]).unwrap();
        let m = mc_moments(&d, 1000, 1).unwrap();
        // same unit in two arms never happens
        assert_eq!(m.p[(0, 3)], 0.0);
        assert_eq!(m.d[(0, 3)], -1.0);
    }
}
