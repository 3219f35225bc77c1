//! Inverse-probability-weighted linear estimators, their linearization
//! vectors and plug-in variance-bound estimation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bounds::{plugin_quadratic, VarianceBound};
use crate::design::AssignmentRealization;
use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::moments::DesignMoments;

const CENTERING_TOL: f64 = 1e-10;
pub const INTERPRETATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ht,
    Hajek,
    /// Arm intercepts of the weighted regression; with identity weights this is OLS.
    Wls,
    /// Completely imputed.
    Ci,
    /// Missing imputed.
    Mi,
    /// Generalized regression.
    Gr,
}

impl EstimatorKind {
    pub fn uses_regression(self) -> bool {
        matches!(self, Self::Wls | Self::Ci | Self::Mi | Self::Gr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ht => "ht",
            Self::Hajek => "hajek",
            Self::Wls => "wls",
            Self::Ci => "ci",
            Self::Mi => "mi",
            Self::Gr => "gr",
        }
    }
}

/// Diagonal regression weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Identity,
    #[default]
    InverseProbability,
    Custom(Vec<f64>),
}

impl Weights {
    pub fn diagonal(&self, pi: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Weights::Identity => Ok(DVector::from_element(pi.len(), 1.0)),
            Weights::InverseProbability => Ok(pi.map(|p| if p > 0.0 { 1.0 / p } else { 0.0 })),
            Weights::Custom(w) if w.len() == pi.len() => Ok(DVector::from_column_slice(w)),
            Weights::Custom(w) => Err(Error::Dimension(format!("{} weights for {} cells", w.len(), pi.len()))),
        }
    }
}

/// How covariates enter the stacked regressor matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slopes {
    /// Rows [e_a', X_i']: one slope vector shared by all arms.
    #[default]
    Common,
    /// Rows [e_a', e_a' ⊗ X_i']: a slope vector per arm.
    PerArm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearOptions {
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub slopes: Slopes,
}

/// kn×k matrix whose column a indicates the cells of arm a.
pub fn intercept_matrix(n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k * n, k, |u, a| (u / n == a) as u8 as f64)
}

pub fn stacked_regressors(k: usize, covariates: &DMatrix<f64>, slopes: Slopes) -> DMatrix<f64> {
    let (n, p) = covariates.shape();
    match slopes {
        Slopes::Common => DMatrix::from_fn(k * n, k + p, |u, c| {
            let (a, i) = (u / n, u % n);
            if c < k {
                (a == c) as u8 as f64
            } else {
                covariates[(i, c - k)]
            }
        }),
        Slopes::PerArm => DMatrix::from_fn(k * n, k + k * p, |u, c| {
            let (a, i) = (u / n, u % n);
            if c < k {
                (a == c) as u8 as f64
            } else if (c - k) / p.max(1) == a {
                covariates[(i, (c - k) % p)]
            } else {
                0.0
            }
        }),
    }
}

/// Subtract column means.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub assignment: AssignmentRealization,
    /// Observed outcome of each unit under its assigned arm.
    pub y_obs: DVector<f64>,
    /// n×p, columns centered.
    pub covariates: DMatrix<f64>,
    /// Full stacked potential outcomes, available in simulation.
    pub potential: Option<DVector<f64>>,
}

impl ExperimentData {
    pub fn new(assignment: AssignmentRealization, y_obs: DVector<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let n = assignment.n();
        if y_obs.len() != n || covariates.nrows() != n {
            return Err(Error::Dimension(format!(
                "{n} units but {} outcomes and {} covariate rows",
                y_obs.len(),
                covariates.nrows()
            )));
        }
        for (j, col) in covariates.column_iter().enumerate() {
            let scale = col.amax().max(1.0);
            if col.mean().abs() > CENTERING_TOL * scale {
                return Err(Error::Covariates(format!("covariate column {j} is not centered (mean {})", col.mean())));
            }
        }
        Ok(Self { assignment, y_obs, covariates, potential: None })
    }

    /// Build from a full potential-outcome vector, observing the assigned arm.
    pub fn from_potential(assignment: AssignmentRealization, potential: DVector<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let n = assignment.n();
        if potential.len() != n * assignment.k() {
            return Err(Error::Dimension(format!("{} potential outcomes for kn = {}", potential.len(), n * assignment.k())));
        }
        let y_obs = DVector::from_fn(n, |i, _| potential[assignment.stacked_index(i)]);
        let mut data = Self::new(assignment, y_obs, covariates)?;
        data.potential = Some(potential);
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.assignment.n()
    }

    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    /// Stacked kn vector with observed outcomes at assigned cells and 0 elsewhere.
    pub fn observed_stacked(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.n() * self.k());
        for i in 0..self.n() {
            y[self.assignment.stacked_index(i)] = self.y_obs[i];
        }
        y
    }
}

/// Every observed cell must have positive inclusion probability.
pub fn check_observed_positivity(assignment: &AssignmentRealization, pi: &DVector<f64>) -> Result<()> {
    for (unit, &arm) in assignment.arm_of().iter().enumerate() {
        if !(pi[assignment.stacked_index(unit)] > 0.0) {
            return Err(Error::ZeroProbabilityObserved { arm, unit });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub kind: EstimatorKind,
    pub options: LinearOptions,
    pub mu_hat: DVector<f64>,
    pub b_hat: Option<DVector<f64>>,
    /// kn×k plug-in linearization; rows of unassigned cells are 0.
    pub z_hat: DMatrix<f64>,
    pub condition: Option<f64>,
    pub warnings: Vec<String>,
}

struct Regression {
    x: DMatrix<f64>,
    m: DVector<f64>,
    g_pinv: DMatrix<f64>,
    b: DVector<f64>,
    condition: f64,
    warnings: Vec<String>,
}

/// b̂ = (x'mRx)⁺ x'mRy over the assigned cells.
fn regress(data: &ExperimentData, pi: &DVector<f64>, opts: &LinearOptions) -> Result<Regression> {
    let x = stacked_regressors(data.k(), &data.covariates, opts.slopes);
    let m = opts.weights.diagonal(pi)?;
    let cols = x.ncols();
    let mut g = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    for i in 0..data.n() {
        let u = data.assignment.stacked_index(i);
        let row = x.row(u).transpose();
        g.ger(m[u], &row, &row, 1.0);
        rhs.axpy(m[u] * data.y_obs[i], &row, 1.0);
    }
    let inv = pinv(&g);
    let mut warnings = Vec::new();
    if !inv.full_rank {
        warnings.push(format!("regression design matrix has rank {} of {cols}; pseudoinverse used", inv.rank));
    }
    let b = &inv.matrix * rhs;
    Ok(Regression { x, m, g_pinv: inv.matrix, b, condition: inv.condition, warnings })
}

/// Column a holds Σ_i of arm-a rows of `mat`, weighted per cell.
fn arm_column_sums(mat: &DMatrix<f64>, n: usize, k: usize, weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(mat.ncols(), k);
    for u in 0..mat.nrows() {
        let w = weight(u);
        if w != 0.0 {
            let mut col = out.column_mut(u / n);
            col.axpy(w, &mat.row(u).transpose(), 1.0);
        }
    }
    out
}

/// kn×k linearization matrix for the regression family, given residuals on
/// the rows that will be used and the regressor Gram inverse.
fn regression_z(
    kind: EstimatorKind,
    reg_x: &DMatrix<f64>,
    m: &DVector<f64>,
    g_pinv: &DMatrix<f64>,
    pi: &DVector<f64>,
    resid: &[(usize, f64)],
    n: usize,
    k: usize,
) -> DMatrix<f64> {
    let kn = n * k;
    let mut z = DMatrix::zeros(kn, k);
    // maps a row of x into k columns of z
    let tail: Option<DMatrix<f64>> = match kind {
        EstimatorKind::Wls => Some(g_pinv.columns(0, k) * n as f64),
        EstimatorKind::Ci => Some(g_pinv * arm_column_sums(reg_x, n, k, |_| 1.0)),
        EstimatorKind::Mi => Some(g_pinv * arm_column_sums(reg_x, n, k, |u| 1.0 - pi[u])),
        _ => None,
    };
    for &(u, e) in resid {
        match &tail {
            Some(t) => {
                let row = reg_x.row(u) * t * (e * pi[u] * m[u]);
                z.row_mut(u).copy_from(&row);
                if kind == EstimatorKind::Mi {
                    z[(u, u / n)] += e * pi[u];
                }
            }
            None => z[(u, u / n)] = e,
        }
    }
    z
}

pub fn estimate_linear(
    kind: EstimatorKind,
    data: &ExperimentData,
    moments: &DesignMoments,
    opts: &LinearOptions,
) -> Result<LinearFit> {
    let (n, k) = (data.n(), data.k());
    if moments.n() != n || moments.k() != k {
        return Err(Error::Dimension(format!("data is {n}×{k}, moments are {}×{}", moments.n(), moments.k())));
    }
    let pi = &moments.pi;
    check_observed_positivity(&data.assignment, pi)?;
    let nf = n as f64;
    let cells: Vec<(usize, usize, f64)> =
        (0..n).map(|i| (data.assignment.stacked_index(i), data.assignment.arm_of()[i], data.y_obs[i])).collect();

    let mut fit = LinearFit {
        kind,
        options: opts.clone(),
        mu_hat: DVector::zeros(k),
        b_hat: None,
        z_hat: DMatrix::zeros(n * k, k),
        condition: None,
        warnings: Vec::new(),
    };
    match kind {
        EstimatorKind::Ht => {
            for &(u, a, y) in &cells {
                fit.mu_hat[a] += y / pi[u] / nf;
                fit.z_hat[(u, a)] = y;
            }
        }
        EstimatorKind::Hajek => {
            let mut num = vec![0.0; k];
            let mut den = vec![0.0; k];
            for &(u, a, y) in &cells {
                num[a] += y / pi[u];
                den[a] += 1.0 / pi[u];
            }
            for a in 0..k {
                if den[a] == 0.0 {
                    return Err(Error::EmptyArm(a));
                }
                fit.mu_hat[a] = num[a] / den[a];
            }
            for &(u, a, y) in &cells {
                fit.z_hat[(u, a)] = y - fit.mu_hat[a];
            }
        }
        _ => {
            let reg = regress(data, pi, opts)?;
            let fitted = &reg.x * &reg.b;
            let b = &reg.b;
            match kind {
                EstimatorKind::Wls => fit.mu_hat.copy_from(&b.rows(0, k)),
                EstimatorKind::Ci => {
                    for u in 0..n * k {
                        fit.mu_hat[u / n] += fitted[u] / nf;
                    }
                }
                EstimatorKind::Mi => {
                    for u in 0..n * k {
                        fit.mu_hat[u / n] += fitted[u] / nf;
                    }
                    for &(u, a, y) in &cells {
                        fit.mu_hat[a] += (y - fitted[u]) / nf;
                    }
                }
                EstimatorKind::Gr => {
                    for u in 0..n * k {
                        fit.mu_hat[u / n] += fitted[u] / nf;
                    }
                    for &(u, a, y) in &cells {
                        fit.mu_hat[a] += (y - fitted[u]) / pi[u] / nf;
                    }
                }
                _ => unreachable!(),
            }
            let resid: Vec<(usize, f64)> = cells.iter().map(|&(u, _, y)| (u, y - fitted[u])).collect();
            fit.z_hat = regression_z(kind, &reg.x, &reg.m, &reg.g_pinv, pi, &resid, n, k);
            fit.condition = Some(reg.condition);
            fit.warnings = reg.warnings;
            fit.b_hat = Some(reg.b);
        }
    }
    Ok(fit)
}

/// Population linearization z from the full potential outcomes, with the
/// population coefficient (x'mπx)⁺x'mπy.
pub fn population_z(
    kind: EstimatorKind,
    y: &DVector<f64>,
    covariates: &DMatrix<f64>,
    k: usize,
    pi: &DVector<f64>,
    opts: &LinearOptions,
) -> Result<DMatrix<f64>> {
    let n = covariates.nrows();
    let kn = n * k;
    if y.len() != kn || pi.len() != kn {
        return Err(Error::Dimension(format!("need stacked vectors of length {kn}")));
    }
    let all: Vec<usize> = (0..kn).collect();
    match kind {
        EstimatorKind::Ht | EstimatorKind::Hajek => {
            let mut means = vec![0.0; k];
            if kind == EstimatorKind::Hajek {
                for u in 0..kn {
                    means[u / n] += y[u] / n as f64;
                }
            }
            Ok(DMatrix::from_fn(kn, k, |u, a| if u / n == a { y[u] - means[a] } else { 0.0 }))
        }
        _ => {
            let x = stacked_regressors(k, covariates, opts.slopes);
            let m = opts.weights.diagonal(pi)?;
            let w = m.component_mul(pi);
            let xw = DMatrix::from_fn(kn, x.ncols(), |u, c| x[(u, c)] * w[u]);
            let g = x.transpose() * &xw;
            let g_pinv = pinv(&g).matrix;
            let b = &g_pinv * (xw.transpose() * y);
            let fitted = &x * &b;
            let resid: Vec<(usize, f64)> = all.iter().map(|&u| (u, y[u] - fitted[u])).collect();
            Ok(regression_z(kind, &x, &m, &g_pinv, pi, &resid, n, k))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PluginVariance {
    /// (1/n²) ẑc' R (D̃/p) R ẑc
    pub raw: f64,
    /// n × raw
    pub scaled: f64,
}

pub fn plugin_varbound(
    z_hat: &DMatrix<f64>,
    assignment: &AssignmentRealization,
    bound: &VarianceBound,
    contrast: &[f64],
) -> Result<PluginVariance> {
    if contrast.len() != z_hat.ncols() {
        return Err(Error::Dimension(format!("contrast of length {} for {} arms", contrast.len(), z_hat.ncols())));
    }
    if bound.dt_over_p.nrows() != z_hat.nrows() {
        return Err(Error::Dimension("bound and linearization sizes differ".into()));
    }
    let zc = z_hat * DVector::from_column_slice(contrast);
    let n = assignment.n() as f64;
    let raw = plugin_quadratic(bound, &zc, assignment) / (n * n);
    Ok(PluginVariance { raw, scaled: raw * n })
}

/// value ± z_level · sqrt(raw variance).
pub fn normal_ci(value: f64, var_raw: f64, level: f64) -> Result<(f64, f64)> {
    if var_raw < 0.0 || var_raw.is_nan() {
        return Err(Error::NegativeVariance(var_raw));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} not in (0,1)")));
    }
    let q = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half = q * var_raw.sqrt();
    Ok((value - half, value + half))
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub condition: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub mu_hat: Vec<f64>,
    pub contrast: Vec<f64>,
    pub contrast_value: f64,
    pub varbound_raw: f64,
    /// Scaled by n.
    pub varbound_estimate: f64,
    /// None when the variance estimate is negative.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub level: f64,
    pub diagnostics: Diagnostics,
}

/// Contrast, plug-in variance bound and interval for any estimate with a
/// plug-in linearization.
pub fn build_report(
    estimator: &str,
    mu_hat: &DVector<f64>,
    z_hat: &DMatrix<f64>,
    assignment: &AssignmentRealization,
    bound: &VarianceBound,
    contrast: &[f64],
    level: f64,
    mut diagnostics: Diagnostics,
) -> Result<EstimateReport> {
    let var = plugin_varbound(z_hat, assignment, bound, contrast)?;
    let value: f64 = mu_hat.iter().zip(contrast).map(|(m, c)| m * c).sum();
    let (ci_low, ci_high) = if var.raw >= 0.0 {
        let (lo, hi) = normal_ci(value, var.raw, level)?;
        (Some(lo), Some(hi))
    } else {
        diagnostics.warnings.push(format!("negative variance-bound estimate {}; consider psd clipping", var.raw));
        (None, None)
    };
    Ok(EstimateReport {
        estimator: estimator.to_string(),
        mu_hat: mu_hat.iter().copied().collect(),
        contrast: contrast.to_vec(),
        contrast_value: value,
        varbound_raw: var.raw,
        varbound_estimate: var.scaled,
        ci_low,
        ci_high,
        level,
        diagnostics,
    })
}

pub fn report_linear(
    fit: &LinearFit,
    data: &ExperimentData,
    bound: &VarianceBound,
    contrast: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    build_report(
        fit.kind.name(),
        &fit.mu_hat,
        &fit.z_hat,
        &data.assignment,
        bound,
        contrast,
        level,
        Diagnostics { condition: fit.condition, warnings: fit.warnings.clone() },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpretationReport {
    /// Relative residual of projecting m⁻¹π⁻¹𝟏 onto col(x).
    pub ci_residual: f64,
    pub ci_holds: bool,
    /// Relative residual of projecting m⁻¹(i − π⁻¹)𝟏 onto col(x).
    pub mi_residual: f64,
    pub mi_holds: bool,
}

fn projection_residual(x: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let fitted = x * (pinv(x).matrix * target);
    (target - fitted).norm() / target.norm().max(1.0)
}

/// Whether the completely- and missing-imputed estimators target the arm means.
pub fn check_interpretation(
    covariates: &DMatrix<f64>,
    k: usize,
    pi: &DVector<f64>,
    opts: &LinearOptions,
) -> Result<InterpretationReport> {
    let n = covariates.nrows();
    let x = stacked_regressors(k, covariates, opts.slopes);
    let m = opts.weights.diagonal(pi)?;
    let inv = |v: f64| if v != 0.0 { 1.0 / v } else { 0.0 };
    let ci = DMatrix::from_fn(n * k, k, |u, a| if u / n == a { inv(m[u]) * inv(pi[u]) } else { 0.0 });
    let mi = DMatrix::from_fn(n * k, k, |u, a| if u / n == a { inv(m[u]) * (1.0 - inv(pi[u])) } else { 0.0 });
    let ci_residual = projection_residual(&x, &ci);
    let mi_residual = projection_residual(&x, &mi);
    Ok(InterpretationReport {
        ci_residual,
        ci_holds: ci_residual <= INTERPRETATION_TOL,
        mi_residual,
        mi_holds: mi_residual <= INTERPRETATION_TOL,
    })
}
