//! One entry point for every estimator: run it on a realization, or compute
//! its theoretical asymptotic variance from full potential outcomes.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::VarianceBound;
use crate::error::{Error, Result};
use crate::linear::{
    estimate_linear, population_z, report_linear, EstimateReport, EstimatorKind, ExperimentData, LinearOptions, Slopes,
    Weights,
};
use crate::model::{
    fit_qmle, fit_qmle_population, linearized_asy_variance, no_harm_gr, opt_gr_logit, opt_i_gr, population_no_harm_alpha,
    population_opt_i, population_opt_linear, population_opt_logit, qmle_gr, report_model, theoretical_asy_variance, Family,
    ModelSpec, OptLinearPrecomputed, OptimizerConfig, QmleWeights,
};
use crate::moments::DesignMoments;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Ht,
    Hajek,
    /// GR with identity regression weights.
    Ols,
    Wls,
    Ci,
    Mi,
    Gr,
    QmleLinear,
    QmleLogit,
    NoHarmLinear,
    NoHarmLogit,
    OptLinear,
    OptLogit,
    OptILinear,
    OptILogit,
}

pub const ALL_ESTIMATORS: [EstimatorChoice; 15] = [
    EstimatorChoice::Ht,
    EstimatorChoice::Hajek,
    EstimatorChoice::Ols,
    EstimatorChoice::Wls,
    EstimatorChoice::Ci,
    EstimatorChoice::Mi,
    EstimatorChoice::Gr,
    EstimatorChoice::QmleLinear,
    EstimatorChoice::QmleLogit,
    EstimatorChoice::NoHarmLinear,
    EstimatorChoice::NoHarmLogit,
    EstimatorChoice::OptLinear,
    EstimatorChoice::OptLogit,
    EstimatorChoice::OptILinear,
    EstimatorChoice::OptILogit,
];

impl EstimatorChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ht => "ht",
            Self::Hajek => "hajek",
            Self::Ols => "ols",
            Self::Wls => "wls",
            Self::Ci => "ci",
            Self::Mi => "mi",
            Self::Gr => "gr",
            Self::QmleLinear => "qmle_linear",
            Self::QmleLogit => "qmle_logit",
            Self::NoHarmLinear => "no_harm_linear",
            Self::NoHarmLogit => "no_harm_logit",
            Self::OptLinear => "opt_linear",
            Self::OptLogit => "opt_logit",
            Self::OptILinear => "opt_i_linear",
            Self::OptILogit => "opt_i_logit",
        }
    }

    fn linear_kind(self) -> Option<EstimatorKind> {
        match self {
            Self::Ht => Some(EstimatorKind::Ht),
            Self::Hajek => Some(EstimatorKind::Hajek),
            Self::Wls => Some(EstimatorKind::Wls),
            Self::Ci => Some(EstimatorKind::Ci),
            Self::Mi => Some(EstimatorKind::Mi),
            Self::Gr | Self::Ols => Some(EstimatorKind::Gr),
            _ => None,
        }
    }

    fn family(self) -> Family {
        match self {
            Self::QmleLogit | Self::NoHarmLogit | Self::OptLogit | Self::OptILogit => Family::Logistic,
            _ => Family::Linear,
        }
    }
}

impl fmt::Display for EstimatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_ESTIMATORS
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

/// Which matrix the variance-targeting estimators minimize against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaChoice {
    /// The first-order design matrix D.
    #[default]
    Design,
    /// The variance-bound matrix D̃.
    Bound,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub slopes: Slopes,
    pub qmle_weights: QmleWeights,
    pub omega: OmegaChoice,
    pub optimizer: OptimizerConfig,
}

/// Everything fixed across realizations of one experiment.
pub struct EstimationContext<'a> {
    pub moments: &'a DesignMoments,
    pub bound: &'a VarianceBound,
    pub contrast: &'a [f64],
    pub level: f64,
    pub covariates: &'a DMatrix<f64>,
    pub linear: LinearOptions,
    pub model: ModelConfig,
    opt_linear: Option<OptLinearPrecomputed>,
}

impl<'a> EstimationContext<'a> {
    pub fn new(
        moments: &'a DesignMoments,
        bound: &'a VarianceBound,
        contrast: &'a [f64],
        level: f64,
        covariates: &'a DMatrix<f64>,
        linear: LinearOptions,
        model: ModelConfig,
    ) -> Result<Self> {
        if contrast.len() != moments.k() {
            return Err(Error::Dimension(format!("contrast of length {} for {} arms", contrast.len(), moments.k())));
        }
        if covariates.nrows() != moments.n() {
            return Err(Error::Dimension(format!("{} covariate rows for {} units", covariates.nrows(), moments.n())));
        }
        Ok(Self { moments, bound, contrast, level, covariates, linear, model, opt_linear: None })
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        match self.model.omega {
            OmegaChoice::Design => &self.moments.d,
            OmegaChoice::Bound => &self.bound.dt,
        }
    }

    /// Build realization-independent pieces needed by the listed estimators.
    pub fn prepare(&mut self, estimators: &[EstimatorChoice]) -> Result<()> {
        if estimators.contains(&EstimatorChoice::OptLinear) && self.opt_linear.is_none() {
            let spec = self.model_spec(Family::Linear);
            let x = spec.regressors(self.moments.k(), self.covariates);
            self.opt_linear = Some(OptLinearPrecomputed::new(x, self.omega(), self.contrast)?);
        }
        Ok(())
    }

    fn model_spec(&self, family: Family) -> ModelSpec {
        ModelSpec { family, slopes: self.model.slopes }
    }

    fn linear_options(&self, choice: EstimatorChoice) -> LinearOptions {
        if choice == EstimatorChoice::Ols {
            LinearOptions { weights: Weights::Identity, slopes: self.linear.slopes }
        } else {
            self.linear.clone()
        }
    }

    /// Run one estimator on observed data. `optimizer_seed` seeds the restarts
    /// of the logistic variance-optimal fit.
    pub fn evaluate(&self, choice: EstimatorChoice, data: &ExperimentData, optimizer_seed: u64) -> Result<EstimateReport> {
        let pi = &self.moments.pi;
        let c = self.contrast;
        if let Some(kind) = choice.linear_kind() {
            let fit = estimate_linear(kind, data, self.moments, &self.linear_options(choice))?;
            let mut report = report_linear(&fit, data, self.bound, c, self.level)?;
            report.estimator = choice.name().to_string();
            return Ok(report);
        }
        let spec = self.model_spec(choice.family());
        let w = &self.model.qmle_weights;
        let mut fit = match choice {
            EstimatorChoice::QmleLinear | EstimatorChoice::QmleLogit => qmle_gr(spec, data, pi, w)?,
            EstimatorChoice::NoHarmLinear | EstimatorChoice::NoHarmLogit => {
                let q = fit_qmle(spec, data, pi, w)?;
                let mut fit = no_harm_gr(&q.model.predict(&data.covariates), data, pi, self.omega(), c)?;
                fit.diagnostics.warnings.extend(q.warnings);
                fit
            }
            EstimatorChoice::OptLinear => match &self.opt_linear {
                Some(pre) => pre.estimate(data, pi, c)?,
                None => {
                    let x = spec.regressors(data.k(), &data.covariates);
                    OptLinearPrecomputed::new(x, self.omega(), c)?.estimate(data, pi, c)?
                }
            },
            EstimatorChoice::OptLogit => {
                let cfg = OptimizerConfig { seed: optimizer_seed, ..self.model.optimizer.clone() };
                opt_gr_logit(data, pi, self.omega(), c, self.model.slopes, &cfg)?.0
            }
            EstimatorChoice::OptILinear | EstimatorChoice::OptILogit => {
                let q = fit_qmle(spec, data, pi, w)?;
                let mut fit = opt_i_gr(&q.model.predict(&data.covariates), data, pi, self.omega(), c)?;
                fit.diagnostics.warnings.extend(q.warnings);
                fit
            }
            _ => unreachable!("linear kinds handled above"),
        };
        fit.name = choice.name().to_string();
        report_model(&fit, data, self.bound, c, self.level)
    }

    /// Population imputations f for a model-assisted estimator.
    fn population_imputations(&self, choice: EstimatorChoice, y: &DVector<f64>) -> Result<DVector<f64>> {
        let (k, pi, c) = (self.moments.k(), &self.moments.pi, self.contrast);
        let spec = self.model_spec(choice.family());
        let qmle = || -> Result<DVector<f64>> {
            let q = fit_qmle_population(spec, y, self.covariates, k, pi, &self.model.qmle_weights)?;
            Ok(q.model.predict(self.covariates))
        };
        match choice {
            EstimatorChoice::QmleLinear | EstimatorChoice::QmleLogit => qmle(),
            EstimatorChoice::NoHarmLinear | EstimatorChoice::NoHarmLogit => {
                let f = qmle()?;
                let alpha = population_no_harm_alpha(&f, y, self.omega(), c)?;
                Ok(f * alpha)
            }
            EstimatorChoice::OptLinear => Ok(population_opt_linear(y, self.covariates, k, self.omega(), c, self.model.slopes)?.1),
            EstimatorChoice::OptLogit => {
                Ok(population_opt_logit(y, self.covariates, k, self.omega(), c, self.model.slopes, &self.model.optimizer)?.1)
            }
            EstimatorChoice::OptILinear | EstimatorChoice::OptILogit => Ok(population_opt_i(&qmle()?, y, self.omega(), c)?.1),
            _ => Err(Error::InvalidArgument(format!("{choice} has no imputation model"))),
        }
    }

    /// n·Var and n·(bound) of the estimator's linearization, from full y:
    /// (1/n)(zc)'D(zc) and (1/n)(zc)'D̃(zc).
    pub fn theoretical(&self, choice: EstimatorChoice, y: &DVector<f64>) -> Result<(f64, f64)> {
        let (d, dt, c) = (&self.moments.d, &self.bound.dt, self.contrast);
        if let Some(kind) = choice.linear_kind() {
            let z = population_z(kind, y, self.covariates, self.moments.k(), &self.moments.pi, &self.linear_options(choice))?;
            return Ok((linearized_asy_variance(&z, d, c), linearized_asy_variance(&z, dt, c)));
        }
        let f = self.population_imputations(choice, y)?;
        Ok((theoretical_asy_variance(&f, y, d, c)?, theoretical_asy_variance(&f, y, dt, c)?))
    }
}
