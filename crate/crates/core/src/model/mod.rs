//! Model-assisted generalized regression estimators: QMLE imputations,
//! the no-harm rescaling, variance-optimal coefficients and the imputed-
//! covariate variant.

mod optimal;
mod optimizer;
mod qmle;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::VarianceBound;
use crate::error::{Error, Result};
use crate::linear::{build_report, check_observed_positivity, stacked_regressors, Diagnostics, EstimateReport, ExperimentData, Slopes};

pub use optimal::{
    no_harm_alpha, no_harm_gr, opt_gr_linear, opt_gr_logit, opt_i_gr, population_no_harm_alpha, population_opt_i,
    population_opt_linear, population_opt_logit, OptLinearPrecomputed,
};
pub use optimizer::{
    minimize, moment_jacobian, moment_vector, validate_weight_matrix, MomentProblem, OptimizerConfig, OptimizerReport,
    RestartOutcome,
};
pub use qmle::{fit_qmle, fit_qmle_population, qmle_objective, QmleFit, QmleWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub family: Family,
    #[serde(default)]
    pub slopes: Slopes,
}

/// Parametric imputation model f^a(x, θ) with arm intercepts first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputationModel {
    pub spec: ModelSpec,
    pub k: usize,
    pub p: usize,
    pub theta: Vec<f64>,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl ModelSpec {
    pub fn parameter_count(&self, k: usize, p: usize) -> usize {
        match self.slopes {
            Slopes::Common => k + p,
            Slopes::PerArm => k + k * p,
        }
    }

    pub fn regressors(&self, k: usize, covariates: &DMatrix<f64>) -> DMatrix<f64> {
        stacked_regressors(k, covariates, self.slopes)
    }

    pub fn link(&self, eta: f64) -> f64 {
        match self.family {
            Family::Linear => eta,
            Family::Logistic => sigmoid(eta),
        }
    }
}

impl ImputationModel {
    pub fn new(spec: ModelSpec, k: usize, p: usize, theta: Vec<f64>) -> Result<Self> {
        let s = spec.parameter_count(k, p);
        if theta.len() != s {
            return Err(Error::Dimension(format!("model needs {s} parameters, got {}", theta.len())));
        }
        Ok(Self { spec, k, p, theta })
    }

    /// Stacked kn imputations.
    pub fn predict(&self, covariates: &DMatrix<f64>) -> DVector<f64> {
        let x = self.spec.regressors(self.k, covariates);
        let eta = x * DVector::from_column_slice(&self.theta);
        eta.map(|v| self.spec.link(v))
    }
}

/// Cell-wise contrast multipliers c_a on arm-a rows.
pub fn contrast_diagonal(n: usize, contrast: &[f64]) -> DVector<f64> {
    DVector::from_fn(n * contrast.len(), |u, _| contrast[u / n])
}

/// C π⁻¹ R y: contrast-signed, inverse-probability-weighted observed outcomes.
pub fn sample_target(data: &ExperimentData, pi: &DVector<f64>, contrast: &[f64]) -> DVector<f64> {
    let n = data.n();
    let mut w = DVector::zeros(n * data.k());
    for i in 0..n {
        let u = data.assignment.stacked_index(i);
        w[u] = contrast[u / n] * data.y_obs[i] / pi[u];
    }
    w
}

/// C y from full potential outcomes.
pub fn population_target(y: &DVector<f64>, n: usize, contrast: &[f64]) -> DVector<f64> {
    y.component_mul(&contrast_diagonal(n, contrast))
}

/// Result of a model-assisted estimator on one realization.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub name: String,
    pub mu_hat: DVector<f64>,
    /// kn imputations actually used in the GR formula.
    pub imputations: DVector<f64>,
    /// Parameters of the imputation (θ, β or α depending on the estimator).
    pub coefficients: Vec<f64>,
    pub z_hat: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

/// μ̂_a = (1/n) Σ_i f_ai + (1/n) Σ_i R_ai/π_ai (y_ai − f_ai), with plug-in
/// linearization diag(y − f) 𝟏 on the observed rows.
pub fn gr_with_imputations(
    name: &str,
    f: &DVector<f64>,
    data: &ExperimentData,
    pi: &DVector<f64>,
) -> Result<ModelFit> {
    let (n, k) = (data.n(), data.k());
    if f.len() != n * k || pi.len() != n * k {
        return Err(Error::Dimension(format!("imputations must have length {}", n * k)));
    }
    check_observed_positivity(&data.assignment, pi)?;
    let nf = n as f64;
    let mut mu = DVector::zeros(k);
    for u in 0..n * k {
        mu[u / n] += f[u] / nf;
    }
    let mut z = DMatrix::zeros(n * k, k);
    for i in 0..n {
        let u = data.assignment.stacked_index(i);
        let resid = data.y_obs[i] - f[u];
        mu[u / n] += resid / pi[u] / nf;
        z[(u, u / n)] = resid;
    }
    Ok(ModelFit {
        name: name.to_string(),
        mu_hat: mu,
        imputations: f.clone(),
        coefficients: Vec::new(),
        z_hat: z,
        diagnostics: Diagnostics { condition: None, warnings: Vec::new() },
    })
}

pub fn report_model(
    fit: &ModelFit,
    data: &ExperimentData,
    bound: &VarianceBound,
    contrast: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    build_report(&fit.name, &fit.mu_hat, &fit.z_hat, &data.assignment, bound, contrast, level, fit.diagnostics.clone())
}

/// QMLE-GR: fit the imputation model, then the GR formula.
pub fn qmle_gr(
    spec: ModelSpec,
    data: &ExperimentData,
    pi: &DVector<f64>,
    weights: &QmleWeights,
) -> Result<ModelFit> {
    let q = fit_qmle(spec, data, pi, weights)?;
    let f = q.model.predict(&data.covariates);
    let mut fit = gr_with_imputations(
        match spec.family {
            Family::Linear => "qmle_gr_linear",
            Family::Logistic => "qmle_gr_logit",
        },
        &f,
        data,
        pi,
    )?;
    fit.coefficients = q.model.theta.clone();
    fit.diagnostics.warnings = q.warnings;
    Ok(fit)
}

/// (1/n) r'Mr with r = C(y − f): the asymptotic variance (×n) of a GR
/// estimator with fixed imputations f.
pub fn theoretical_asy_variance(f: &DVector<f64>, y: &DVector<f64>, m: &DMatrix<f64>, contrast: &[f64]) -> Result<f64> {
    if f.len() != y.len() || m.nrows() != y.len() {
        return Err(Error::Dimension("imputations, outcomes and matrix disagree".into()));
    }
    let n = y.len() / contrast.len();
    let r = population_target(&(y - f), n, contrast);
    Ok(r.dot(&(m * &r)) / n as f64)
}

/// (1/n) (zc)'M(zc) for a linearization matrix z.
pub fn linearized_asy_variance(z: &DMatrix<f64>, m: &DMatrix<f64>, contrast: &[f64]) -> f64 {
    let zc = z * DVector::from_column_slice(contrast);
    let n = z.nrows() / contrast.len();
    zc.dot(&(m * &zc)) / n as f64
}
