//! Identified variance-bound matrices and their inverse-probability-weighted
//! form used by plug-in variance estimation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::AssignmentRealization;
use crate::error::{Error, Result};
use crate::linalg::{check_symmetric, sym_eigen, sym_eigenvalues};
use crate::moments::{crd_first_order_matrix, demeaning_block, DesignMoments, MomentMethod};

/// Tolerance for recognising a −1 entry of D on exact moments.
pub const EXACT_MINUS_ONE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    AronowSamii,
    Neyman,
    User,
}

#[derive(Debug, Clone)]
pub struct VarianceBound {
    pub kind: BoundKind,
    pub dt: DMatrix<f64>,
    /// Entries where D = −1, i.e. the pair is never jointly observed.
    pub mask_minus1: DMatrix<bool>,
    pub dt_over_p: DMatrix<f64>,
    pub psd_clipped: bool,
}

fn minus_one_mask(moments: &DesignMoments, tol: Option<f64>) -> DMatrix<bool> {
    let kn = moments.kn();
    let pos = |u: usize| moments.pi[u] > 0.0;
    DMatrix::from_fn(kn, kn, |u, v| {
        if !(pos(u) && pos(v)) {
            return false;
        }
        match (moments.method, tol) {
            (_, Some(t)) => (moments.d[(u, v)] + 1.0).abs() <= t,
            (MomentMethod::Exact, None) => (moments.d[(u, v)] + 1.0).abs() <= EXACT_MINUS_ONE_TOL,
            (MomentMethod::MonteCarlo { .. }, None) => moments.p[(u, v)] == 0.0,
        }
    })
}

/// Hadamard division with 0/0 resolving to 0; a nonzero bound entry over a
/// zero joint probability cannot be estimated and is an error.
fn divide_by_joint(dt: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kn = dt.nrows();
    let mut out = DMatrix::zeros(kn, kn);
    for v in 0..kn {
        for u in 0..kn {
            let b = dt[(u, v)];
            if p[(u, v)] > 0.0 {
                out[(u, v)] = b / p[(u, v)];
            } else if b.abs() > EXACT_MINUS_ONE_TOL {
                return Err(Error::NotIdentified(format!(
                    "bound entry ({u},{v}) = {b} where the pair is never jointly observed"
                )));
            }
        }
    }
    Ok(out)
}

fn check_flagged(moments: &DesignMoments) -> Result<()> {
    match (0..moments.kn()).find(|&u| moments.pi[u] == 0.0 && !moments.zero_mask[u]) {
        Some(u) => Err(Error::UnflaggedZero(u)),
        None => Ok(()),
    }
}

/// D̃ = D + I(D = −1) + diag(row counts of −1 entries).
/// `tol_m1 = None` picks the default rule for the moment method.
pub fn aronow_samii_bound(moments: &DesignMoments, tol_m1: Option<f64>) -> Result<VarianceBound> {
    check_flagged(moments)?;
    let mask = minus_one_mask(moments, tol_m1);
    let kn = moments.kn();
    let mut dt = moments.d.clone();
    for u in 0..kn {
        let mut count = 0.0;
        for v in 0..kn {
            if mask[(u, v)] {
                dt[(u, v)] = 0.0;
                count += 1.0;
            }
        }
        dt[(u, u)] += count;
    }
    // unflagged −1s that were only approximately −1 must not survive as tiny residues
    let dt_over_p = divide_by_joint(&dt, &moments.p)?;
    Ok(VarianceBound { kind: BoundKind::AronowSamii, dt, mask_minus1: mask, dt_over_p, psd_clipped: false })
}

/// Joint inclusion matrix of a two-arm completely randomized design.
fn crd_joint(n: usize, n_t: usize) -> DMatrix<f64> {
    let counts = [n_t, n - n_t];
    let nf = n as f64;
    DMatrix::from_fn(2 * n, 2 * n, |u, v| {
        let (a, i, b, j) = (u / n, u % n, v / n, v % n);
        if i == j {
            if a == b {
                counts[a] as f64 / nf
            } else {
                0.0
            }
        } else {
            counts[a] as f64 * (counts[b] as f64 - (a == b) as u8 as f64) / (nf * (nf - 1.0))
        }
    })
}

/// blockdiag((n/n_t) A_n, (n/n_c) A_n) for the two-arm completely randomized design.
pub fn neyman_bound_crd(n: usize, n_t: usize) -> Result<VarianceBound> {
    if n_t == 0 || n_t >= n {
        return Err(Error::InvalidArgument(format!("need 0 < n_t < n, got n_t={n_t}, n={n}")));
    }
    let n_c = n - n_t;
    if n_t < 2 || n_c < 2 {
        return Err(Error::NotIdentified("an arm with one unit has no jointly observed within-arm pairs".into()));
    }
    let a = demeaning_block(n);
    let nf = n as f64;
    let mut dt = DMatrix::zeros(2 * n, 2 * n);
    dt.view_mut((0, 0), (n, n)).copy_from(&(&a * (nf / n_t as f64)));
    dt.view_mut((n, n), (n, n)).copy_from(&(&a * (nf / n_c as f64)));
    let d = crd_first_order_matrix(n, n_t)?;
    let mask = d.map(|x| (x + 1.0).abs() <= EXACT_MINUS_ONE_TOL);
    let dt_over_p = divide_by_joint(&dt, &crd_joint(n, n_t))?;
    Ok(VarianceBound { kind: BoundKind::Neyman, dt, mask_minus1: mask, dt_over_p, psd_clipped: false })
}

/// Wrap a user-supplied bound matrix. Validity is not assumed; run
/// [`certify_bound`] before relying on it.
pub fn bound_from_matrix(moments: &DesignMoments, dt: DMatrix<f64>) -> Result<VarianceBound> {
    if dt.shape() != (moments.kn(), moments.kn()) {
        return Err(Error::Dimension(format!("bound is {:?}, moments have dimension {}", dt.shape(), moments.kn())));
    }
    check_symmetric(&dt)?;
    let mask = minus_one_mask(moments, None);
    let dt_over_p = divide_by_joint(&dt, &moments.p)?;
    Ok(VarianceBound { kind: BoundKind::User, dt, mask_minus1: mask, dt_over_p, psd_clipped: false })
}

/// Zero the negative spectrum of D̃/p so plug-in estimates cannot be negative.
pub fn psd_clip(bound: &VarianceBound) -> VarianceBound {
    let (vals, vecs) = sym_eigen(&bound.dt_over_p);
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&x| x.max(0.0)));
    let m = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    let m = (&m + m.transpose()) * 0.5;
    VarianceBound { dt_over_p: m, psd_clipped: true, ..bound.clone() }
}

/// z' (D̃/p) z over the cells active in one realization.
pub fn plugin_quadratic(bound: &VarianceBound, z: &DVector<f64>, realization: &AssignmentRealization) -> f64 {
    let act = realization.active_indices();
    let mut total = 0.0;
    for &u in &act {
        if z[u] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for &v in &act {
            row += bound.dt_over_p[(u, v)] * z[v];
        }
        total += z[u] * row;
    }
    total
}

#[derive(Debug, Clone, Serialize)]
pub struct CrdComparison {
    pub n: usize,
    pub n_t: usize,
    /// Eigenvalues (ascending) of the Neyman minus Aronow–Samii difference
    /// after contrast signing and projecting out the arm intercepts.
    pub projected: Vec<f64>,
    /// Same difference without the projection.
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub min_eigenvalue: f64,
    pub valid: bool,
    /// Entries where D = −1 but the bound is nonzero.
    pub mask_violations: usize,
    pub crd_comparison: Option<CrdComparison>,
}

/// Recognise a two-arm completely randomized design from its moments.
fn detect_crd(moments: &DesignMoments) -> Option<(usize, usize)> {
    if moments.k() != 2 || moments.n() < 4 {
        return None;
    }
    let n = moments.n();
    let n_t = (moments.pi[0] * n as f64).round() as usize;
    if (0..n).any(|i| (moments.pi[i] - n_t as f64 / n as f64).abs() > 1e-12) {
        return None;
    }
    let d = crd_first_order_matrix(n, n_t).ok()?;
    ((&d - &moments.d).abs().max() <= 1e-9).then_some((n, n_t))
}

fn crd_comparison(moments: &DesignMoments, n: usize, n_t: usize) -> Result<CrdComparison> {
    let neyman = neyman_bound_crd(n, n_t)?;
    let asb = aronow_samii_bound(moments, None)?;
    let signs = DVector::from_fn(2 * n, |u, _| if u < n { -1.0 } else { 1.0 });
    let c = DMatrix::from_diagonal(&signs);
    let diff = &c * (&neyman.dt - &asb.dt) * &c;
    let mut proj = DMatrix::identity(2 * n, 2 * n);
    for blk in 0..2 {
        for i in 0..n {
            for j in 0..n {
                proj[(blk * n + i, blk * n + j)] -= 1.0 / n as f64;
            }
        }
    }
    let projected = &proj * &diff * &proj;
    Ok(CrdComparison { n, n_t, projected: sym_eigenvalues(&projected), raw: sym_eigenvalues(&diff) })
}

pub fn certify_bound(moments: &DesignMoments, bound: &VarianceBound, tol: f64) -> Result<Certificate> {
    if bound.dt.shape() != moments.d.shape() {
        return Err(Error::Dimension(format!("bound {:?} vs moments {:?}", bound.dt.shape(), moments.d.shape())));
    }
    let diff = &bound.dt - &moments.d;
    let min_eigenvalue = sym_eigenvalues(&((&diff + diff.transpose()) * 0.5)).first().copied().unwrap_or(0.0);
    let mask = minus_one_mask(moments, None);
    let mask_violations = mask.iter().zip(bound.dt.iter()).filter(|(m, b)| **m && b.abs() > EXACT_MINUS_ONE_TOL).count();
    let crd_comparison = match detect_crd(moments) {
        Some((n, n_t)) if n_t >= 2 && n - n_t >= 2 => Some(crd_comparison(moments, n, n_t)?),
        _ => None,
    };
    Ok(Certificate { min_eigenvalue, valid: min_eigenvalue >= -tol && mask_violations == 0, mask_violations, crd_comparison })
}
