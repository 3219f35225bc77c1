//! Second-order design tensor and the norms used to bound plug-in variance
//! estimator error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::{draw_rng, enumerate_support, DesignSpec, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};

pub const DEFAULT_TENSOR_CAP: usize = 64;
const ORACLE_MAX_DIM: usize = 16;
const ORACLE_RESTARTS: u64 = 100;

/// Dense order-4 array over a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dim: usize,
    entries: Vec<f64>,
}

pub type SecondOrderTensor = Tensor4;

impl Tensor4 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![0.0; dim.pow(4)] }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    for l in 0..dim {
                        t.entries[((i * dim + j) * dim + k) * dim + l] = f(i, j, k, l);
                    }
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.dim + j) * self.dim + k) * self.dim + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.entries[self.idx(i, j, k, l)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let x = self.idx(i, j, k, l);
        self.entries[x] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Multilinear form with one vector per mode.
    pub fn apply(&self, v: [&DVector<f64>; 4]) -> f64 {
        let d = self.dim;
        let mut total = 0.0;
        for i in 0..d {
            for j in 0..d {
                let ij = v[0][i] * v[1][j];
                if ij == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let ijk = ij * v[2][k];
                    for l in 0..d {
                        total += ijk * v[3][l] * self.get(i, j, k, l);
                    }
                }
            }
        }
        total
    }

    /// Contract every mode except `free` against the given vectors.
    fn partial(&self, v: [&DVector<f64>; 4], free: usize) -> DVector<f64> {
        let d = self.dim;
        let mut g = DVector::zeros(d);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let idx = [i, j, k, l];
                        let mut w = self.get(i, j, k, l);
                        for (m, vm) in v.iter().enumerate() {
                            if m != free {
                                w *= vm[idx[m]];
                            }
                        }
                        g[idx[free]] += w;
                    }
                }
            }
        }
        g
    }
}

/// S = (E[(R⊗R)⊗(R⊗R)] − p⊗p) / (p⊗p), with 0 wherever p⊗p is 0.
pub fn second_order_tensor(design: &DesignSpec, cap: usize) -> Result<SecondOrderTensor> {
    let kn = design.kn();
    if kn > cap {
        return Err(Error::InvalidArgument(format!("tensor dimension {kn} exceeds cap {cap}")));
    }
    let support = enumerate_support(design, DEFAULT_ENUMERATION_CAP)?;
    let mut e4 = Tensor4::zeros(kn);
    let mut p = DMatrix::<f64>::zeros(kn, kn);
    for (real, prob) in support.iter() {
        let act = real.active_indices();
        for &i in &act {
            for &j in &act {
                p[(i, j)] += prob;
                for &k in &act {
                    for &l in &act {
                        let x = e4.idx(i, j, k, l);
                        e4.entries[x] += prob;
                    }
                }
            }
        }
    }
    Ok(Tensor4::from_fn(kn, |i, j, k, l| {
        let denom = p[(i, j)] * p[(k, l)];
        if denom == 0.0 {
            0.0
        } else {
            (e4.get(i, j, k, l) - denom) / denom
        }
    }))
}

/// T[i,j,k,l] = W_ij W_kl S[i,j,k,l] for a bound matrix W.
pub fn weighted_tensor(s: &SecondOrderTensor, weight: &DMatrix<f64>) -> Result<Tensor4> {
    if weight.shape() != (s.dim(), s.dim()) {
        return Err(Error::Dimension(format!("weight is {:?}, tensor dimension {}", weight.shape(), s.dim())));
    }
    Ok(Tensor4::from_fn(s.dim(), |i, j, k, l| weight[(i, j)] * weight[(k, l)] * s.get(i, j, k, l)))
}

/// Largest absolute slice sum over all four modes; an upper bound on σ_max.
pub fn tensor_slice_norm_bound(t: &Tensor4) -> f64 {
    let d = t.dim();
    let mut sums = vec![vec![0.0; d]; 4];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let a = t.get(i, j, k, l).abs();
                    sums[0][i] += a;
                    sums[1][j] += a;
                    sums[2][k] += a;
                    sums[3][l] += a;
                }
            }
        }
    }
    sums.iter().flatten().cloned().fold(0.0, f64::max)
}

fn l4_normalize(v: &mut DVector<f64>) -> bool {
    let norm = v.iter().map(|x| x.powi(4)).sum::<f64>().powf(0.25);
    if norm == 0.0 {
        return false;
    }
    *v /= norm;
    true
}

/// Multi-start block ascent for max T(v1,v2,v3,v4) over unit l4 spheres.
/// Returns the best value found, which is a lower bound on the true maximum.
pub fn tensor_sigma_max_oracle(t: &Tensor4) -> Result<f64> {
    let d = t.dim();
    if d > ORACLE_MAX_DIM {
        return Err(Error::InvalidArgument(format!("oracle supports dimension up to {ORACLE_MAX_DIM}, got {d}")));
    }
    if d == 0 {
        return Ok(0.0);
    }
    let mut starts: Vec<DVector<f64>> = (0..d).map(|i| DVector::from_fn(d, |j, _| (i == j) as u8 as f64)).collect();
    starts.push(DVector::from_element(d, 1.0));
    for r in 0..ORACLE_RESTARTS {
        let mut rng = draw_rng(0x5eed, r);
        starts.push(DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)));
    }
    let mut best: f64 = 0.0;
    for mut s in starts {
        if !l4_normalize(&mut s) {
            continue;
        }
        let mut v = [s.clone(), s.clone(), s.clone(), s];
        let mut value = t.apply([&v[0], &v[1], &v[2], &v[3]]);
        for _ in 0..500 {
            for m in 0..4 {
                let g = t.partial([&v[0], &v[1], &v[2], &v[3]], m);
                let mut next = g.map(|x| x.signum() * x.abs().cbrt());
                if l4_normalize(&mut next) {
                    v[m] = next;
                }
            }
            let updated = t.apply([&v[0], &v[1], &v[2], &v[3]]);
            let gain = updated - value;
            value = updated;
            if gain.abs() <= 1e-12 * value.abs().max(1.0) {
                break;
            }
        }
        best = best.max(value);
    }
    Ok(best)
}
