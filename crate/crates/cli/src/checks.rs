//! Small self-contained oracle suites run by the `check` command.

use designbased::bounds::{aronow_samii_bound, certify_bound, plugin_quadratic, PSD_TOL};
use designbased::design::{draw_rng, enumerate_support, DesignSpec, DEFAULT_ENUMERATION_CAP};
use designbased::linear::{estimate_linear, EstimatorKind, ExperimentData, LinearOptions};
use designbased::moments::{crd_first_order_matrix, exact_moments};
use designbased::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, worst: f64, tol: f64) -> CheckOutcome {
    CheckOutcome { name, passed: worst <= tol, detail: format!("max deviation {worst:.3e} (tolerance {tol:.0e})") }
}

fn crd_oracle() -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for n in 2..=8 {
        for n_t in 1..n {
            let m = exact_moments(&DesignSpec::completely_randomized(n, vec![n_t, n - n_t])?)?;
            worst = worst.max((&m.d - crd_first_order_matrix(n, n_t)?).abs().max());
        }
    }
    Ok(outcome("crd design matrix matches closed form", worst, 1e-12))
}

fn small_designs() -> Result<Vec<DesignSpec>> {
    Ok(vec![
        DesignSpec::completely_randomized(6, vec![2, 4])?,
        DesignSpec::bernoulli(5, vec![0.3, 0.7])?,
        DesignSpec::completely_randomized(6, vec![2, 2, 2])?,
    ])
}

/// Σ P(R) μ̂_HT = mean potential outcome, and Var over the support equals
/// (1/n²) z'Dz for the contrast.
fn ht_unbiased_and_variance() -> Result<(CheckOutcome, CheckOutcome)> {
    let mut rng = draw_rng(7, 0);
    let (mut bias_worst, mut var_worst): (f64, f64) = (0.0, 0.0);
    for design in small_designs()? {
        let (n, k) = (design.n(), design.k());
        let m = exact_moments(&design)?;
        let support = enumerate_support(&design, DEFAULT_ENUMERATION_CAP)?;
        let y = DVector::from_fn(k * n, |_, _| rng.random_range(-2.0..2.0));
        let mut c = vec![0.0; k];
        c[0] = -1.0;
        c[k - 1] = 1.0;
        let empty = DMatrix::zeros(n, 0);
        let (mut mean, mut second) = (DVector::zeros(k), 0.0);
        for (real, prob) in support.iter() {
            let data = ExperimentData::from_potential(real.clone(), y.clone(), empty.clone())?;
            let fit = estimate_linear(EstimatorKind::Ht, &data, &m, &LinearOptions::default())?;
            mean += &fit.mu_hat * prob;
            let tau: f64 = fit.mu_hat.iter().zip(&c).map(|(a, b)| a * b).sum();
            second += prob * tau * tau;
        }
        let truth = DVector::from_fn(k, |a, _| y.rows(a * n, n).mean());
        bias_worst = bias_worst.max((&mean - &truth).abs().max());
        let tau: f64 = truth.iter().zip(&c).map(|(a, b)| a * b).sum();
        let zc = DVector::from_fn(k * n, |u, _| c[u / n] * y[u]);
        let predicted = (zc.transpose() * &m.d * &zc)[(0, 0)] / (n * n) as f64;
        var_worst = var_worst.max((second - tau * tau - predicted).abs());
    }
    Ok((outcome("horvitz-thompson exact unbiasedness", bias_worst, 1e-12), outcome("variance equals (zc)'D(zc)/n^2", var_worst, 1e-10)))
}

fn bound_certificates() -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut invalid = 0;
    for design in small_designs()?.into_iter().chain([DesignSpec::completely_randomized(4, vec![2, 2])?]) {
        let m = exact_moments(&design)?;
        let cert = certify_bound(&m, &aronow_samii_bound(&m, None)?, PSD_TOL)?;
        worst = worst.max(-cert.min_eigenvalue);
        invalid += usize::from(!cert.valid);
    }
    Ok(CheckOutcome {
        name: "aronow-samii bound certifies",
        passed: invalid == 0,
        detail: format!("{invalid} invalid, most negative eigenvalue {:.3e}", -worst),
    })
}

/// E[ẑ'R(D̃/p)Rẑ] = z'D̃z for a fixed z.
fn plugin_unbiased() -> Result<CheckOutcome> {
    let design = DesignSpec::bernoulli(4, vec![0.4, 0.6])?;
    let m = exact_moments(&design)?;
    let bound = aronow_samii_bound(&m, None)?;
    let mut rng = draw_rng(11, 0);
    let z = DVector::from_fn(m.kn(), |_, _| rng.random_range(-1.0..1.0));
    let support = enumerate_support(&design, DEFAULT_ENUMERATION_CAP)?;
    let mean: f64 = support.iter().map(|(real, prob)| prob * plugin_quadratic(&bound, &z, real)).sum();
    let target = (z.transpose() * &bound.dt * &z)[(0, 0)];
    Ok(outcome("plug-in bound unbiased", (mean - target).abs(), 1e-10))
}

pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let (ht, var) = ht_unbiased_and_variance()?;
    Ok(vec![crd_oracle()?, ht, var, bound_certificates()?, plugin_unbiased()?])
}
