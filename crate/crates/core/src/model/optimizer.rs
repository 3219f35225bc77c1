//! Gradient descent with backtracking line search for the logistic
//! variance-optimal coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::design::draw_rng;
use crate::error::{Error, Result};
use crate::linalg::{check_symmetric, sym_eigenvalues};

const MIN_WEIGHT_NORM: f64 = 1e-12;
const MAX_BACKTRACKS: usize = 80;
const HESSIAN_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Sufficient-decrease constant of the Armijo condition.
    pub armijo: f64,
    /// Step shrink factor while backtracking.
    pub backtrack: f64,
    pub grad_tol: f64,
    /// Half-width of the coordinate box for the first restart.
    pub box_half_width: f64,
    /// Added to the half-width for each later restart.
    pub box_growth: f64,
    pub restarts: usize,
    pub restart_sd: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            armijo: 0.1,
            backtrack: 0.5,
            grad_tol: 0.01,
            box_half_width: 10.0,
            box_growth: 0.1,
            restarts: 8,
            restart_sd: 0.1,
            max_iter: 20_000,
            seed: 0,
        }
    }
}

/// Estimating equations ĝ(θ) = (1/n) G(θ)'Ω(w − C f(θ)) with G = C ∂f/∂θ,
/// for a logistic imputation model with regressors x.
#[derive(Debug, Clone, Copy)]
pub struct MomentProblem<'a> {
    pub x: &'a DMatrix<f64>,
    pub omega: &'a DMatrix<f64>,
    /// Contrast sign per stacked cell.
    pub signs: &'a DVector<f64>,
    /// C π⁻¹ R y for sample fits, C y for population fits.
    pub target: &'a DVector<f64>,
    pub n: usize,
}

/// Ω must be symmetric with spectral norm at least 1e-12.
pub fn validate_weight_matrix(omega: &DMatrix<f64>) -> Result<()> {
    check_symmetric(omega)?;
    let dim = omega.nrows().max(1) as f64;
    let frob = omega.norm();
    if frob / dim.sqrt() >= MIN_WEIGHT_NORM {
        return Ok(());
    }
    // Frobenius norm is within √dim of the spectral norm; settle the gap exactly.
    let spectral = if frob == 0.0 {
        0.0
    } else {
        sym_eigenvalues(omega).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    };
    if spectral < MIN_WEIGHT_NORM {
        return Err(Error::InvalidArgument(format!("weight matrix has spectral norm {spectral:e}")));
    }
    Ok(())
}

struct Evaluation {
    moments: DVector<f64>,
    /// Residual direction Ω(w − Cf).
    v: DVector<f64>,
    f: DVector<f64>,
    g: DMatrix<f64>,
}

impl MomentProblem<'_> {
    fn evaluate(&self, theta: &DVector<f64>) -> Evaluation {
        let f = (self.x * theta).map(sigmoid);
        let resid = self.target - f.component_mul(self.signs);
        let v = self.omega * resid;
        let mut g = self.x.clone();
        for (u, mut row) in g.row_iter_mut().enumerate() {
            row *= self.signs[u] * f[u] * (1.0 - f[u]);
        }
        let moments = g.tr_mul(&v) / self.n as f64;
        Evaluation { moments, v, f, g }
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        self.evaluate(theta).moments.norm_squared()
    }

    fn jacobian_of(&self, e: &Evaluation) -> DMatrix<f64> {
        let og = self.omega * &e.g;
        let cross = e.g.tr_mul(&og);
        let mut curvature = self.x.clone();
        for (u, mut row) in curvature.row_iter_mut().enumerate() {
            let fu = e.f[u];
            row *= e.v[u] * self.signs[u] * fu * (1.0 - fu) * (1.0 - 2.0 * fu);
        }
        (curvature.tr_mul(self.x) - cross) / self.n as f64
    }

    /// (ĝ, ∇Q) with Q = ĝ'ĝ.
    fn moments_and_gradient(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let e = self.evaluate(theta);
        let j = self.jacobian_of(&e);
        let grad = j.tr_mul(&e.moments) * 2.0;
        (e.moments, grad)
    }
}

pub fn moment_vector(problem: &MomentProblem, theta: &DVector<f64>) -> DVector<f64> {
    problem.evaluate(theta).moments
}

/// ∂ĝ_t/∂θ_u.
pub fn moment_jacobian(problem: &MomentProblem, theta: &DVector<f64>) -> DMatrix<f64> {
    problem.jacobian_of(&problem.evaluate(theta))
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartOutcome {
    pub index: usize,
    pub converged: bool,
    pub left_box: bool,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerReport {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub winner: usize,
    pub restarts: Vec<RestartOutcome>,
    /// Smallest eigenvalue of a finite-difference Hessian of Q at the solution.
    pub hessian_min_eigenvalue: f64,
    pub warnings: Vec<String>,
}

fn run_restart(problem: &MomentProblem, cfg: &OptimizerConfig, index: usize, dim: usize) -> (RestartOutcome, DVector<f64>) {
    let mut rng = draw_rng(cfg.seed, index as u64);
    let normal = Normal::new(0.0, cfg.restart_sd).expect("restart_sd validated");
    let mut theta = DVector::from_fn(dim, |_, _| rng.sample(normal));
    let half = cfg.box_half_width + cfg.box_growth * index as f64;
    let mut outcome = RestartOutcome { index, converged: false, left_box: false, iterations: 0, objective: f64::INFINITY };
    for it in 0..cfg.max_iter {
        outcome.iterations = it;
        let (moments, grad) = problem.moments_and_gradient(&theta);
        let q = moments.norm_squared();
        outcome.objective = q;
        let gnorm2 = grad.norm_squared();
        if gnorm2.sqrt() < cfg.grad_tol {
            outcome.converged = true;
            break;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = &theta - &grad * t;
            let qc = problem.objective(&cand);
            if qc <= q - cfg.armijo * t * gnorm2 {
                next = Some(cand);
                break;
            }
            t *= cfg.backtrack;
        }
        let Some(next) = next else { break };
        theta = next;
        if theta.amax() > half {
            outcome.left_box = true;
            break;
        }
    }
    (outcome, theta)
}

fn hessian_min_eigenvalue(problem: &MomentProblem, theta: &DVector<f64>) -> f64 {
    let s = theta.len();
    let mut h = DMatrix::zeros(s, s);
    for j in 0..s {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[j] += HESSIAN_STEP;
        down[j] -= HESSIAN_STEP;
        let col = (problem.moments_and_gradient(&up).1 - problem.moments_and_gradient(&down).1) / (2.0 * HESSIAN_STEP);
        h.set_column(j, &col);
    }
    let sym = (&h + h.transpose()) * 0.5;
    sym_eigenvalues(&sym).into_iter().fold(f64::INFINITY, f64::min)
}

/// Multi-start minimization of ĝ'ĝ. Restarts run in parallel; the converged
/// restart with the smallest objective wins, ties going to the lower index.
pub fn minimize(problem: &MomentProblem, cfg: &OptimizerConfig) -> Result<OptimizerReport> {
    if !(cfg.restart_sd > 0.0) || !(cfg.armijo > 0.0 && cfg.armijo < 0.5) || !(cfg.backtrack > 0.0 && cfg.backtrack < 1.0) {
        return Err(Error::InvalidArgument("optimizer needs restart_sd > 0, armijo in (0, 0.5), backtrack in (0, 1)".into()));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("optimizer needs at least one restart".into()));
    }
    validate_weight_matrix(problem.omega)?;
    let dim = problem.x.ncols();
    let runs: Vec<(RestartOutcome, DVector<f64>)> =
        (0..cfg.restarts).into_par_iter().map(|r| run_restart(problem, cfg, r, dim)).collect();
    let winner = runs
        .iter()
        .filter(|(o, _)| o.converged)
        .min_by(|a, b| a.0.objective.total_cmp(&b.0.objective).then(a.0.index.cmp(&b.0.index)))
        .map(|(o, _)| o.index);
    let Some(winner) = winner else {
        return Err(Error::Optimizer(format!("no interior stationary point in {} restarts", cfg.restarts)));
    };
    let theta = runs[winner].1.clone();
    let (moments, grad) = problem.moments_and_gradient(&theta);
    let hmin = hessian_min_eigenvalue(problem, &theta);
    let mut warnings = Vec::new();
    if hmin < 0.0 {
        warnings.push(format!("Hessian of the objective has a negative eigenvalue {hmin:e} at the solution"));
    }
    Ok(OptimizerReport {
        theta: theta.iter().copied().collect(),
        objective: moments.norm_squared(),
        gradient_norm: grad.norm(),
        winner,
        restarts: runs.into_iter().map(|(o, _)| o).collect(),
        hessian_min_eigenvalue: hmin,
        warnings,
    })
}
