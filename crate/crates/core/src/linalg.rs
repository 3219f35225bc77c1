//! Dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cut used for every Moore-Penrose inverse.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Pinv {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub full_rank: bool,
    /// Ratio of the largest to the smallest retained singular value.
    pub condition: f64,
}

pub fn pinv(m: &DMatrix<f64>) -> Pinv {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Pinv { matrix: DMatrix::zeros(c, r), rank: 0, full_rank: true, condition: 1.0 };
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = PINV_RTOL * smax;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            smin = smin.min(s);
            let ucol = u.column(idx);
            let vrow = vt.row(idx);
            out += (vrow.transpose() / s) * ucol.transpose();
        }
    }
    let condition = if rank == 0 { f64::INFINITY } else { smax / smin };
    Pinv { matrix: out, rank, full_rank: rank == r.min(c), condition }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let asym = max_asymmetry(m);
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    sym_eigen(m).0.iter().cloned().collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TopEigen {
    pub value: f64,
    pub converged: bool,
    pub matvecs: usize,
}

/// Largest algebraic eigenvalue of a symmetric matrix by restarted Lanczos
/// with full reorthogonalization. Stops when the Ritz residual falls below
/// `tol * |theta|`.
pub fn lanczos_largest(m: &DMatrix<f64>, tol: f64, max_matvecs: usize) -> TopEigen {
    let n = m.nrows();
    if n == 0 {
        return TopEigen { value: 0.0, converged: true, matvecs: 0 };
    }
    if n <= 48 {
        let v = sym_eigenvalues(m);
        return TopEigen { value: v[n - 1], converged: true, matvecs: 0 };
    }
    let block = n.min(80);
    let mut start = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    start /= start.norm();
    let mut matvecs = 0usize;
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(block);
        let mut alpha = Vec::with_capacity(block);
        let mut beta: Vec<f64> = Vec::with_capacity(block);
        let mut q = start.clone();
        let mut last_beta = 0.0;
        for step in 0..block {
            let mut w = m * &q;
            matvecs += 1;
            let a = q.dot(&w);
            w.axpy(-a, &q, 1.0);
            if step > 0 {
                w.axpy(-beta[step - 1], &basis[step - 1], 1.0);
            }
            basis.push(q.clone());
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&w);
                    w.axpy(-proj, b, 1.0);
                }
            }
            alpha.push(a);
            let bnorm = w.norm();
            last_beta = bnorm;
            if bnorm <= 1e-13 * (a.abs() + 1.0) || step + 1 == block {
                break;
            }
            beta.push(bnorm);
            q = w / bnorm;
        }
        let size = alpha.len();
        let mut t = DMatrix::zeros(size, size);
        for i in 0..size {
            t[(i, i)] = alpha[i];
            if i + 1 < size {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let (vals, vecs) = sym_eigen(&t);
        let theta = vals[size - 1];
        let s = vecs.column(size - 1);
        let residual = (last_beta * s[size - 1]).abs();
        best = best.max(theta);
        let exhausted = size < block && last_beta <= 1e-13 * (alpha[size - 1].abs() + 1.0);
        if residual <= tol * theta.abs().max(1e-300) || exhausted || size == n {
            return TopEigen { value: theta, converged: true, matvecs };
        }
        if matvecs >= max_matvecs {
            return TopEigen { value: best, converged: false, matvecs };
        }
        let mut ritz = DVector::zeros(n);
        for (j, b) in basis.iter().enumerate() {
            ritz.axpy(s[j], b, 1.0);
        }
        let norm = ritz.norm();
        start = ritz / norm;
    }
}

/// Sum of `u_i M_ij v_j` over sparse index/value lists.
pub fn sparse_bilinear(m: &DMatrix<f64>, u: &[(usize, f64)], v: &[(usize, f64)]) -> f64 {
    let mut total = 0.0;
    for &(i, ui) in u {
        if ui == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for &(j, vj) in v {
            row += m[(i, j)] * vj;
        }
        total += ui * row;
    }
    total
}

/// Nonzero entries of a vector as (index, value) pairs.
pub fn nonzeros(v: &DVector<f64>) -> Vec<(usize, f64)> {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x)).collect()
}

/// `M v` restricted to the nonzero pattern of `v`.
pub fn sparse_matvec(m: &DMatrix<f64>, v: &[(usize, f64)]) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for &(j, vj) in v {
        out.axpy(vj, &m.column(j), 1.0);
    }
    out
}
