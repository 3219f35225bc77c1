//! Largest-eigenvalue complexity measures of a first-order design matrix.

use nalgebra::DMatrix;
use serde::Serialize;

use super::DesignMoments;
use crate::error::{Error, Result};
use crate::linalg::{check_symmetric, lanczos_largest};

pub const SPECTRAL_TOL: f64 = 1e-8;
pub const MAX_MATVECS: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct SpectralResult {
    /// `f64::INFINITY` when a provably impossible cell participates.
    pub value: f64,
    pub converged: bool,
    pub matvecs: usize,
    pub warnings: Vec<String>,
}

/// Largest algebraic eigenvalue, optionally after zeroing the diagonal.
pub fn largest_eigenvalue(m: &DMatrix<f64>, zero_diag: bool, tol: f64) -> Result<SpectralResult> {
    check_symmetric(m)?;
    let mut work = m.clone();
    if zero_diag {
        work.fill_diagonal(0.0);
    }
    let top = lanczos_largest(&work, tol, MAX_MATVECS);
    let mut warnings = Vec::new();
    if !top.converged {
        warnings.push(format!("eigenvalue iteration stopped after {} products without converging", top.matvecs));
    }
    Ok(SpectralResult { value: top.value, converged: top.converged, matvecs: top.matvecs, warnings })
}

/// Complexity of the sub-block of D spanning `arms`. Infinite when any cell in
/// those arms is provably never assigned; cells that merely went unobserved in
/// simulation are dropped with a warning.
pub fn complexity(moments: &DesignMoments, arms: &[usize], zero_diag: bool) -> Result<SpectralResult> {
    if let Some(&a) = arms.iter().find(|&&a| a >= moments.k()) {
        return Err(Error::InvalidArgument(format!("arm {a} out of range")));
    }
    let idx = moments.arm_indices(arms);
    if idx.iter().any(|&u| moments.proven_zero[u]) {
        return Ok(SpectralResult { value: f64::INFINITY, converged: true, matvecs: 0, warnings: Vec::new() });
    }
    let kept: Vec<usize> = idx.iter().copied().filter(|&u| !moments.zero_mask[u]).collect();
    let dropped = idx.len() - kept.len();
    let sub = moments.d.select_rows(&kept).select_columns(&kept);
    let mut out = largest_eigenvalue(&sub, zero_diag, SPECTRAL_TOL)?;
    if dropped > 0 {
        out.warnings.push(format!("{dropped} cells never sampled but not provably impossible; excluded"));
    }
    Ok(out)
}

/// k×k table: diagonal entries use one arm, off-diagonal entries the arm pair.
pub fn complexity_table(moments: &DesignMoments, zero_diag: bool) -> Result<(DMatrix<f64>, Vec<String>)> {
    let k = moments.k();
    let mut table = DMatrix::zeros(k, k);
    let mut warnings = Vec::new();
    for a in 0..k {
        for b in a..k {
            let arms: Vec<usize> = if a == b { vec![a] } else { vec![a, b] };
            let r = complexity(moments, &arms, zero_diag)?;
            warnings.extend(r.warnings.into_iter().map(|w| format!("arms {arms:?}: {w}")));
            table[(a, b)] = r.value;
            table[(b, a)] = r.value;
        }
    }
    Ok((table, warnings))
}
