//! Weighted quasi-likelihood fits of the imputation model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sigmoid, Family, ImputationModel, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::linear::{check_observed_positivity, ExperimentData};

const NEWTON_MAX_ITER: usize = 500;
const NEWTON_TOL: f64 = 1e-10;
/// Coefficients beyond this magnitude suggest separation.
const SEPARATION_LIMIT: f64 = 25.0;

/// Per-cell weights ω multiplying the inverse-probability-weighted loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QmleWeights {
    /// ω = π: the fit is unweighted over observed cells.
    #[default]
    Probability,
    /// ω = 1: observed cells weighted by 1/π.
    Unit,
    Custom(Vec<f64>),
}

impl QmleWeights {
    fn omega(&self, pi: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            QmleWeights::Probability => Ok(pi.clone()),
            QmleWeights::Unit => Ok(DVector::from_element(pi.len(), 1.0)),
            QmleWeights::Custom(w) if w.len() == pi.len() => {
                if w.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidArgument("QMLE weights must be positive".into()));
                }
                Ok(DVector::from_column_slice(w))
            }
            QmleWeights::Custom(w) => Err(Error::Dimension(format!("{} weights for {} cells", w.len(), pi.len()))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QmleFit {
    pub model: ImputationModel,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Weighted negative log-likelihood Σ w [log(1 + e^η) − yη].
fn logistic_loss(x: &DMatrix<f64>, rows: &[(usize, f64, f64)], theta: &DVector<f64>) -> f64 {
    rows.iter()
        .map(|&(u, y, w)| {
            let eta = x.row(u).dot(&theta.transpose());
            let log1pexp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            w * (log1pexp - y * eta)
        })
        .sum()
}

fn logistic_loss_gradient(x: &DMatrix<f64>, rows: &[(usize, f64, f64)], theta: &DVector<f64>) -> DVector<f64> {
    let mut grad = DVector::zeros(x.ncols());
    for &(u, y, w) in rows {
        let eta = x.row(u).dot(&theta.transpose());
        grad.axpy(w * (sigmoid(eta) - y), &x.row(u).transpose(), 1.0);
    }
    grad
}

fn squared_loss(x: &DMatrix<f64>, rows: &[(usize, f64, f64)], theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut grad = DVector::zeros(x.ncols());
    let mut value = 0.0;
    for &(u, y, w) in rows {
        let r = x.row(u).dot(&theta.transpose()) - y;
        value += 0.5 * w * r * r;
        grad.axpy(w * r, &x.row(u).transpose(), 1.0);
    }
    (value, grad)
}

fn sample_rows(data: &ExperimentData, pi: &DVector<f64>, omega: &DVector<f64>) -> Vec<(usize, f64, f64)> {
    (0..data.n())
        .map(|i| {
            let u = data.assignment.stacked_index(i);
            (u, data.y_obs[i], omega[u] / pi[u])
        })
        .collect()
}

/// Sample criterion minimized by [`fit_qmle`] and its gradient at `theta`:
/// weighted squared loss (halved) for the linear family, weighted negative
/// log-likelihood for the logistic one.
pub fn qmle_objective(
    spec: ModelSpec,
    data: &ExperimentData,
    pi: &DVector<f64>,
    weights: &QmleWeights,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_observed_positivity(&data.assignment, pi)?;
    let omega = weights.omega(pi)?;
    let x = spec.regressors(data.k(), &data.covariates);
    if theta.len() != x.ncols() {
        return Err(Error::Dimension(format!("{} parameters for {} regressors", theta.len(), x.ncols())));
    }
    let rows = sample_rows(data, pi, &omega);
    Ok(match spec.family {
        Family::Linear => squared_loss(&x, &rows, theta),
        Family::Logistic => (logistic_loss(&x, &rows, theta), logistic_loss_gradient(&x, &rows, theta)),
    })
}

/// Weighted fit over a list of (row of regressors, outcome, weight).
fn weighted_fit(spec: ModelSpec, k: usize, p: usize, x: &DMatrix<f64>, rows: &[(usize, f64, f64)]) -> Result<QmleFit> {
    let s = x.ncols();
    let mut warnings = Vec::new();
    let gram = |curv: &dyn Fn(usize) -> f64| {
        let mut h = DMatrix::zeros(s, s);
        for &(u, _, w) in rows {
            let r = x.row(u).transpose();
            h.ger(w * curv(u), &r, &r, 1.0);
        }
        h
    };
    match spec.family {
        Family::Linear => {
            let h = gram(&|_| 1.0);
            let mut rhs = DVector::zeros(s);
            for &(u, y, w) in rows {
                rhs.axpy(w * y, &x.row(u).transpose(), 1.0);
            }
            let inv = pinv(&h);
            if !inv.full_rank {
                warnings.push(format!("QMLE normal equations have rank {} of {s}", inv.rank));
            }
            let theta = &inv.matrix * rhs;
            Ok(QmleFit { model: ImputationModel::new(spec, k, p, theta.iter().copied().collect())?, iterations: 1, converged: true, warnings })
        }
        Family::Logistic => {
            let loglik = |theta: &DVector<f64>| -logistic_loss(x, rows, theta);
            let mut theta = DVector::zeros(s);
            let mut current = loglik(&theta);
            let mut converged = false;
            let mut iterations = 0;
            for it in 0..NEWTON_MAX_ITER {
                iterations = it + 1;
                let eta = x * &theta;
                let grad = -logistic_loss_gradient(x, rows, &theta);
                let h = gram(&|u| {
                    let q = sigmoid(eta[u]);
                    q * (1.0 - q)
                });
                let step = pinv(&h).matrix * &grad;
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let cand = &theta + &step * t;
                    let val = loglik(&cand);
                    if val >= current - 1e-14 * current.abs().max(1.0) {
                        theta = cand;
                        current = val;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted || (&step * t).amax() < NEWTON_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                warnings.push(format!("logistic QMLE stopped at the {NEWTON_MAX_ITER}-iteration cap"));
            }
            if theta.amax() > SEPARATION_LIMIT {
                warnings.push(format!("logistic coefficients exceed {SEPARATION_LIMIT} in magnitude; possible separation"));
            }
            Ok(QmleFit { model: ImputationModel::new(spec, k, p, theta.iter().copied().collect())?, iterations, converged, warnings })
        }
    }
}

/// Minimize the sample criterion with weights (R/π)·ω over observed cells.
pub fn fit_qmle(spec: ModelSpec, data: &ExperimentData, pi: &DVector<f64>, weights: &QmleWeights) -> Result<QmleFit> {
    check_observed_positivity(&data.assignment, pi)?;
    let omega = weights.omega(pi)?;
    let (k, p) = (data.k(), data.covariates.ncols());
    let x = spec.regressors(k, &data.covariates);
    let rows = sample_rows(data, pi, &omega);
    weighted_fit(spec, k, p, &x, &rows)
}

/// Population criterion: every cell with weight ω.
pub fn fit_qmle_population(
    spec: ModelSpec,
    y: &DVector<f64>,
    covariates: &DMatrix<f64>,
    k: usize,
    pi: &DVector<f64>,
    weights: &QmleWeights,
) -> Result<QmleFit> {
    let omega = weights.omega(pi)?;
    let x = spec.regressors(k, covariates);
    let rows: Vec<(usize, f64, f64)> = (0..y.len()).map(|u| (u, y[u], omega[u])).collect();
    weighted_fit(spec, k, covariates.ncols(), &x, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{draw_rng, sample_assignment, AssignmentRealization, DesignSpec};
    use crate::linear::{center_columns, estimate_linear, EstimatorKind, LinearOptions, Slopes, Weights};
    use crate::model::{gr_with_imputations, qmle_gr};
    use crate::moments::closed_form_moments;
    use rand::Rng;

    #[test]
    fn constant_probability_matches_ols() {
        let n = 8;
        let d = DesignSpec::completely_randomized(n, vec![3, 5]).unwrap();
        let m = closed_form_moments(&d).unwrap();
        let x = center_columns(&DMatrix::from_fn(n, 2, |i, j| ((i * (j + 2)) % 5) as f64));
        let y = DVector::from_fn(2 * n, |u, _| ((u * 7) % 11) as f64 * 0.3);
        let real = AssignmentRealization::new(2, vec![0, 1, 1, 0, 1, 1, 0, 1]).unwrap();
        let data = ExperimentData::from_potential(real, y, x).unwrap();
        let spec = ModelSpec::default();
        let q = fit_qmle(spec, &data, &m.pi, &QmleWeights::Probability).unwrap();
        let ols = estimate_linear(
            EstimatorKind::Wls,
            &data,
            &m,
            &LinearOptions { weights: Weights::Identity, slopes: Slopes::Common },
        )
        .unwrap();
        let b = ols.b_hat.unwrap();
        for (a, b) in q.model.theta.iter().zip(b.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_linear_outcomes_recovered() {
        let n = 10;
        let x = center_columns(&DMatrix::from_fn(n, 1, |i, _| (i as f64).powi(2) * 0.1));
        let spec = ModelSpec { family: Family::Linear, slopes: Slopes::PerArm };
        let truth = [1.0, -2.0, 0.5, 3.0];
        let y = ImputationModel::new(spec, 2, 1, truth.to_vec()).unwrap().predict(&x);
        let real = AssignmentRealization::new(2, (0..n).map(|i| i % 2).collect()).unwrap();
        let m = closed_form_moments(&DesignSpec::bernoulli(n, vec![0.5, 0.5]).unwrap()).unwrap();
        let data = ExperimentData::from_potential(real, y.clone(), x).unwrap();
        let q = fit_qmle(spec, &data, &m.pi, &QmleWeights::Unit).unwrap();
        for (a, b) in q.model.theta.iter().zip(truth) {
            assert!((a - b).abs() < 1e-9);
        }
        let fit = gr_with_imputations("gr", &q.model.predict(&data.covariates), &data, &m.pi).unwrap();
        assert!(fit.z_hat.amax() < 1e-9);
    }

    #[test]
    fn logistic_recovers_generating_parameters() {
        let n = 10_000;
        let mut rng = draw_rng(17, 0);
        let x = center_columns(&DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0));
        let spec = ModelSpec { family: Family::Logistic, slopes: Slopes::Common };
        let truth = [-0.5, 0.7, 1.2];
        let prob = ImputationModel::new(spec, 2, 1, truth.to_vec()).unwrap().predict(&x);
        let y = prob.map(|q| (rng.random::<f64>() < q) as u8 as f64);
        let d = DesignSpec::bernoulli(n, vec![0.5, 0.5]).unwrap();
        let real = sample_assignment(&d, &mut draw_rng(17, 1)).unwrap();
        let pi = DVector::from_element(2 * n, 0.5);
        let data = ExperimentData::from_potential(real, y, x).unwrap();
        let q = fit_qmle(spec, &data, &pi, &QmleWeights::Probability).unwrap();
        assert!(q.converged);
        for (a, b) in q.model.theta.iter().zip(truth) {
            assert!((a - b).abs() < 0.1, "{:?}", q.model.theta);
        }
    }

    #[test]
    fn linear_qmle_gr_matches_linear_gr() {
        // ω = π gives the unweighted fit, which pairs with identity regression weights
        let n = 7;
        let probs: Vec<Vec<f64>> = (0..n).map(|i| vec![0.3 + 0.05 * i as f64, 0.7 - 0.05 * i as f64]).collect();
        let d = DesignSpec::bernoulli_per_unit(probs).unwrap();
        let m = closed_form_moments(&d).unwrap();
        let x = center_columns(&DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.9).sin()));
        let y = DVector::from_fn(2 * n, |u, _| (u as f64 * 0.37).cos() * 2.0);
        for (weights, m_weights) in
            [(QmleWeights::Probability, Weights::Identity), (QmleWeights::Unit, Weights::InverseProbability)]
        {
            for seed in 0..20 {
                let real = sample_assignment(&d, &mut draw_rng(5, seed)).unwrap();
                let data = ExperimentData::from_potential(real, y.clone(), x.clone()).unwrap();
                let a = qmle_gr(ModelSpec::default(), &data, &m.pi, &weights).unwrap();
                let b = estimate_linear(
                    EstimatorKind::Gr,
                    &data,
                    &m,
                    &LinearOptions { weights: m_weights.clone(), slopes: Slopes::Common },
                )
                .unwrap();
                assert!((a.mu_hat - b.mu_hat).amax() < 1e-10);
            }
        }
    }
}
