//! Variance-targeting choices of the imputation: the no-harm rescaling, the
//! optimal coefficients (linear closed form, logistic by optimization) and
//! the imputed-covariate regression.

use nalgebra::{DMatrix, DVector};

use super::optimizer::{minimize, validate_weight_matrix, MomentProblem, OptimizerConfig, OptimizerReport};
use super::{contrast_diagonal, gr_with_imputations, population_target, sample_target, ModelFit};
use crate::error::{Error, Result};
use crate::linalg::{check_symmetric, pinv, sym_eigenvalues};
use crate::linear::{intercept_matrix, stacked_regressors, ExperimentData, Slopes};

const NO_HARM_MIN_DENOMINATOR: f64 = 1e-6;
const EIGEN_WARNING_RATIO: f64 = 1e-8;

fn check_square(omega: &DMatrix<f64>, kn: usize) -> Result<()> {
    if omega.shape() != (kn, kn) {
        return Err(Error::Dimension(format!("weight matrix is {:?}, expected {kn}x{kn}", omega.shape())));
    }
    Ok(())
}

fn alpha_from_target(f: &DVector<f64>, target: &DVector<f64>, omega: &DMatrix<f64>, contrast: &[f64]) -> Result<f64> {
    let kn = f.len();
    check_square(omega, kn)?;
    let n = kn / contrast.len();
    let u = f.component_mul(&contrast_diagonal(n, contrast));
    let ou = omega * &u;
    let denominator = u.dot(&ou);
    if denominator.abs() / n as f64 <= NO_HARM_MIN_DENOMINATOR {
        return Err(Error::WeakIdentification(format!(
            "no-harm denominator {denominator:e} is negligible at n = {n}"
        )));
    }
    Ok(target.dot(&ou) / denominator)
}

/// α̂ minimizing the estimated variance of the rescaled-imputation GR contrast.
pub fn no_harm_alpha(
    f: &DVector<f64>,
    data: &ExperimentData,
    pi: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
) -> Result<f64> {
    alpha_from_target(f, &sample_target(data, pi, contrast), omega, contrast)
}

pub fn population_no_harm_alpha(f: &DVector<f64>, y: &DVector<f64>, omega: &DMatrix<f64>, contrast: &[f64]) -> Result<f64> {
    let n = y.len() / contrast.len();
    alpha_from_target(f, &population_target(y, n, contrast), omega, contrast)
}

/// GR with imputations α̂ f.
pub fn no_harm_gr(
    f: &DVector<f64>,
    data: &ExperimentData,
    pi: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
) -> Result<ModelFit> {
    let alpha = no_harm_alpha(f, data, pi, omega, contrast)?;
    let mut fit = gr_with_imputations("no_harm_gr", &(f * alpha), data, pi)?;
    fit.coefficients = vec![alpha];
    Ok(fit)
}

/// Realization-independent pieces of the linear optimal coefficients:
/// β = (x̃'Ωx̃)⁺ x̃'Ω w with x̃ = Cx.
#[derive(Debug, Clone)]
pub struct OptLinearPrecomputed {
    pub x: DMatrix<f64>,
    omega_xt: DMatrix<f64>,
    gram_pinv: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl OptLinearPrecomputed {
    pub fn new(x: DMatrix<f64>, omega: &DMatrix<f64>, contrast: &[f64]) -> Result<Self> {
        let kn = x.nrows();
        check_square(omega, kn)?;
        check_symmetric(omega)?;
        let signs = contrast_diagonal(kn / contrast.len(), contrast);
        let mut xt = x.clone();
        for (u, mut row) in xt.row_iter_mut().enumerate() {
            row *= signs[u];
        }
        let omega_xt = omega * &xt;
        let gram = xt.tr_mul(&omega_xt);
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = sym_eigenvalues(&gram);
        let top = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut warnings = Vec::new();
        let weak = eig.iter().filter(|v| v.abs() < EIGEN_WARNING_RATIO * top).count();
        if weak > 0 {
            warnings.push(format!("{weak} weakly identified direction(s) in the optimal-coefficient system"));
        }
        Ok(Self { x, omega_xt, gram_pinv: pinv(&gram).matrix, warnings })
    }

    pub fn coefficients(&self, target: &DVector<f64>) -> DVector<f64> {
        &self.gram_pinv * self.omega_xt.tr_mul(target)
    }

    pub fn estimate(&self, data: &ExperimentData, pi: &DVector<f64>, contrast: &[f64]) -> Result<ModelFit> {
        let beta = self.coefficients(&sample_target(data, pi, contrast));
        let mut fit = gr_with_imputations("opt_gr_linear", &(&self.x * &beta), data, pi)?;
        fit.coefficients = beta.iter().copied().collect();
        fit.diagnostics.warnings = self.warnings.clone();
        Ok(fit)
    }
}

pub fn opt_gr_linear(
    data: &ExperimentData,
    pi: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
    slopes: Slopes,
) -> Result<ModelFit> {
    let x = stacked_regressors(data.k(), &data.covariates, slopes);
    OptLinearPrecomputed::new(x, omega, contrast)?.estimate(data, pi, contrast)
}

/// Population optimal linear coefficients and imputations.
pub fn population_opt_linear(
    y: &DVector<f64>,
    covariates: &DMatrix<f64>,
    k: usize,
    omega: &DMatrix<f64>,
    contrast: &[f64],
    slopes: Slopes,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let pre = OptLinearPrecomputed::new(stacked_regressors(k, covariates, slopes), omega, contrast)?;
    let beta = pre.coefficients(&population_target(y, covariates.nrows(), contrast));
    let f = &pre.x * &beta;
    Ok((beta, f))
}

fn logit_solve(
    x: &DMatrix<f64>,
    target: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
    cfg: &OptimizerConfig,
) -> Result<(OptimizerReport, DVector<f64>)> {
    let kn = x.nrows();
    check_square(omega, kn)?;
    validate_weight_matrix(omega)?;
    let n = kn / contrast.len();
    let signs = contrast_diagonal(n, contrast);
    let problem = MomentProblem { x, omega, signs: &signs, target, n };
    let report = minimize(&problem, cfg)?;
    let f = (x * DVector::from_column_slice(&report.theta)).map(super::sigmoid);
    Ok((report, f))
}

pub fn opt_gr_logit(
    data: &ExperimentData,
    pi: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
    slopes: Slopes,
    cfg: &OptimizerConfig,
) -> Result<(ModelFit, OptimizerReport)> {
    let x = stacked_regressors(data.k(), &data.covariates, slopes);
    let (report, f) = logit_solve(&x, &sample_target(data, pi, contrast), omega, contrast, cfg)?;
    let mut fit = gr_with_imputations("opt_gr_logit", &f, data, pi)?;
    fit.coefficients = report.theta.clone();
    fit.diagnostics.warnings = report.warnings.clone();
    Ok((fit, report))
}

pub fn population_opt_logit(
    y: &DVector<f64>,
    covariates: &DMatrix<f64>,
    k: usize,
    omega: &DMatrix<f64>,
    contrast: &[f64],
    slopes: Slopes,
    cfg: &OptimizerConfig,
) -> Result<(OptimizerReport, DVector<f64>)> {
    let x = stacked_regressors(k, covariates, slopes);
    logit_solve(&x, &population_target(y, covariates.nrows(), contrast), omega, contrast, cfg)
}

fn opt_i_coefficients(
    f: &DVector<f64>,
    target: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
) -> Result<(DVector<f64>, DVector<f64>, Vec<String>)> {
    let kn = f.len();
    let k = contrast.len();
    let n = kn / k;
    let mut basis = DMatrix::zeros(kn, k + 1);
    basis.columns_mut(0, k).copy_from(&intercept_matrix(n, k));
    basis.set_column(k, f);
    let pre = OptLinearPrecomputed::new(basis.clone(), omega, contrast)?;
    let beta = pre.coefficients(target);
    Ok((beta.clone(), basis * beta, pre.warnings))
}

/// GR whose imputations regress on the arm intercepts and the fitted values f.
pub fn opt_i_gr(
    f: &DVector<f64>,
    data: &ExperimentData,
    pi: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
) -> Result<ModelFit> {
    let (beta, imputations, warnings) = opt_i_coefficients(f, &sample_target(data, pi, contrast), omega, contrast)?;
    let mut fit = gr_with_imputations("opt_i_gr", &imputations, data, pi)?;
    fit.coefficients = beta.iter().copied().collect();
    fit.diagnostics.warnings = warnings;
    Ok(fit)
}

/// Population coefficients and imputations for the imputed-covariate variant.
pub fn population_opt_i(
    f: &DVector<f64>,
    y: &DVector<f64>,
    omega: &DMatrix<f64>,
    contrast: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = y.len() / contrast.len();
    let (beta, imputations, _) = opt_i_coefficients(f, &population_target(y, n, contrast), omega, contrast)?;
    Ok((beta, imputations))
}
