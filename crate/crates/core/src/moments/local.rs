//! Exact exposure moments when base assignments are independent across units:
//! a unit's exposure depends only on its closed neighborhood, so pairs with
//! disjoint neighborhoods factorize and the rest are enumerated locally.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{ExposureRules, InterferenceGraph};

const LOCAL_CONFIG_CAP: usize = 4_194_304;

struct Local<'a> {
    probs: &'a [Vec<f64>],
    rules: &'a ExposureRules,
    closed: Vec<Vec<usize>>,
}

impl Local<'_> {
    /// Joint exposure distribution of the target units, flattened with the
    /// first target's exposure as the slowest index.
    fn joint(&self, targets: &[usize]) -> Result<Vec<f64>> {
        let k = self.rules.len();
        let m = self.rules.base_arms();
        let mut units: Vec<usize> = targets.iter().flat_map(|&t| self.closed[t].iter().copied()).collect();
        units.sort_unstable();
        units.dedup();
        let allowed: Vec<Vec<(usize, f64)>> = units
            .iter()
            .map(|&u| self.probs[u].iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect())
            .collect();
        let configs: f64 = allowed.iter().map(|a| a.len() as f64).product();
        if configs > LOCAL_CONFIG_CAP as f64 {
            return Err(Error::SupportTooLarge { size: configs, cap: LOCAL_CONFIG_CAP });
        }
        let positions: Vec<Vec<usize>> = targets
            .iter()
            .map(|&t| self.closed[t].iter().map(|u| units.binary_search(u).expect("unit in union")).collect())
            .collect();

        let mut out = vec![0.0; k.pow(targets.len() as u32)];
        let mut odo = vec![0usize; units.len()];
        let mut counts = vec![0usize; m];
        loop {
            let prob: f64 = odo.iter().zip(&allowed).map(|(&x, a)| a[x].1).product();
            let mut flat = 0;
            for pos in &positions {
                counts.iter_mut().for_each(|c| *c = 0);
                for &q in &pos[1..] {
                    counts[allowed[q][odo[q]].0] += 1;
                }
                let e = self.rules.classify(allowed[pos[0]][odo[pos[0]]].0, &counts)?;
                flat = flat * k + e;
            }
            out[flat] += prob;

            let mut q = 0;
            while q < odo.len() {
                odo[q] += 1;
                if odo[q] < allowed[q].len() {
                    break;
                }
                odo[q] = 0;
                q += 1;
            }
            if q == odo.len() {
                break;
            }
        }
        Ok(out)
    }
}

pub(super) fn exposure_joint(
    probs: &[Vec<f64>],
    graph: &InterferenceGraph,
    rules: &ExposureRules,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = graph.n();
    let k = rules.len();
    let mode = rules.neighborhood();
    let closed: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut v = vec![i];
            v.extend(graph.neighbors(i, mode).iter().copied());
            v
        })
        .collect();
    let local = Local { probs, rules, closed };

    let mut pi = DVector::zeros(k * n);
    for i in 0..n {
        for (e, q) in local.joint(&[i])?.into_iter().enumerate() {
            pi[e * n + i] = q;
        }
    }

    let mut p = DMatrix::zeros(k * n, k * n);
    for u in 0..k * n {
        for v in 0..k * n {
            if u % n != v % n {
                p[(u, v)] = pi[u] * pi[v];
            } else if u == v {
                p[(u, v)] = pi[u];
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, c) in local.closed.iter().enumerate() {
        for &u in c {
            members[u].push(i);
        }
    }
    let mut seen = vec![usize::MAX; n];
    for i in 0..n {
        for &u in &local.closed[i] {
            for &j in &members[u] {
                if j <= i || seen[j] == i {
                    continue;
                }
                seen[j] = i;
                let joint = local.joint(&[i, j])?;
                for a in 0..k {
                    for b in 0..k {
                        let q = joint[a * k + b];
                        p[(a * n + i, b * n + j)] = q;
                        p[(b * n + j, a * n + i)] = q;
                    }
                }
            }
        }
    }
    Ok((pi, p))
}
