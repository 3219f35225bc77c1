//! Replication-style simulation driver and metric tables.

mod data;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{
    impute_potential_outcomes, logistic_shocks, normal_covariates, preprocess_covariates, village_pattern_design,
    village_strata, village_stratified_design, MIN_STRATUM_SIZE, TOPCODE_LIMIT, VILLAGE_PATTERN,
};

use crate::bounds::{aronow_samii_bound, neyman_bound_crd, psd_clip, VarianceBound};
use crate::design::{build_design, draw_rng, sample_assignment, DesignConfig, DesignKind, DesignSpec};
use crate::error::{Error, Result};
use crate::io::{fmt15, read_covariates_csv, read_edges_csv, read_groups_csv, read_potential_csv};
use crate::linear::{ExperimentData, LinearOptions};
use crate::moments::{moments_auto, DesignMoments, MomentMethod};
use crate::network::{derive_exposure_design, random_out_graph, ExposureDef, ExposureRules, InterferenceGraph, NeighborMode};
use crate::pipeline::{EstimationContext, EstimatorChoice, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundChoice {
    #[default]
    AronowSamii,
    /// Two-arm completely randomized designs only.
    Neyman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphSource {
    EdgesCsv { path: PathBuf },
    RandomOut { min_degree: usize, max_degree: usize, seed: u64 },
}

fn default_treated_arm() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RulesConfig {
    DirectAndSpillover {
        #[serde(default = "default_treated_arm")]
        treated_arm: usize,
        #[serde(default)]
        neighborhood: NeighborMode,
    },
    TwoRoundSessions {
        #[serde(default)]
        neighborhood: NeighborMode,
    },
    Custom {
        base_arms: usize,
        #[serde(default)]
        neighborhood: NeighborMode,
        exposures: Vec<ExposureDef>,
    },
}

impl RulesConfig {
    pub fn build(&self) -> Result<ExposureRules> {
        match self {
            RulesConfig::DirectAndSpillover { treated_arm, neighborhood } => {
                if *treated_arm > 1 {
                    return Err(Error::Rules("treated_arm must be 0 or 1".into()));
                }
                Ok(ExposureRules::direct_and_spillover(*treated_arm, *neighborhood))
            }
            RulesConfig::TwoRoundSessions { neighborhood } => Ok(ExposureRules::two_round_sessions(*neighborhood)),
            RulesConfig::Custom { base_arms, neighborhood, exposures } => {
                ExposureRules::new(*base_arms, *neighborhood, exposures.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub graph: GraphSource,
    pub rules: RulesConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutcomeConfig {
    /// y_ai = 1{intercept_a + x_i'slopes > ε_i} with one fixed logistic shock per unit.
    LogisticThreshold { intercepts: Vec<f64>, slopes: Vec<f64>, shock_seed: u64 },
    /// `unit_id,y_1..y_k` in unit-index order.
    PotentialCsv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateConfig {
    #[default]
    None,
    Csv {
        path: PathBuf,
        #[serde(default)]
        topcode: Vec<String>,
    },
    Normal {
        p: usize,
        seed: u64,
    },
}

fn default_mc_reps() -> u64 {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsConfig {
    /// Draws used when exact moments are unavailable.
    #[serde(default = "default_mc_reps")]
    pub mc_reps: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { mc_reps: default_mc_reps(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub metrics_csv: Option<PathBuf>,
    pub raw_csv: Option<PathBuf>,
    pub metadata_json: Option<PathBuf>,
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub design: DesignConfig,
    /// `unit_id,group_id` file filling `stratum_of` of a stratified design.
    #[serde(default)]
    pub strata_csv: Option<PathBuf>,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    pub outcomes: OutcomeConfig,
    #[serde(default)]
    pub covariates: CovariateConfig,
    pub estimators: Vec<EstimatorChoice>,
    pub contrast: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub bound: BoundChoice,
    #[serde(default)]
    pub psd_clip: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub linear: LinearOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Design section of a config file on its own, as used by the one-shot
/// commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub design: DesignConfig,
    #[serde(default)]
    pub strata_csv: Option<PathBuf>,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
}

impl DesignFile {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&read_config(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn build(&self, base_dir: &Path) -> Result<(DesignSpec, Option<Arc<InterferenceGraph>>)> {
        build_experiment_design(&self.design, self.strata_csv.as_deref(), self.network.as_ref(), base_dir)
    }
}

/// Base design, with strata read from file and exposures derived from a graph
/// when configured.
pub fn build_experiment_design(
    design: &DesignConfig,
    strata_csv: Option<&Path>,
    network: Option<&NetworkConfig>,
    base_dir: &Path,
) -> Result<(DesignSpec, Option<Arc<InterferenceGraph>>)> {
    let mut design_cfg = design.clone();
    if let (Some(path), DesignConfig::Stratified { n, stratum_of, .. }) = (strata_csv, &mut design_cfg) {
        *stratum_of = read_groups_csv(&resolve(base_dir, path), *n)?;
    }
    let base = build_design(&design_cfg)?;
    let Some(net) = network else {
        return Ok((base, None));
    };
    let n = base.n();
    let graph = match &net.graph {
        GraphSource::EdgesCsv { path } => InterferenceGraph::from_edges(n, &read_edges_csv(&resolve(base_dir, path))?)?,
        GraphSource::RandomOut { min_degree, max_degree, seed } => random_out_graph(n, *min_degree, *max_degree, *seed)?,
    };
    let graph = Arc::new(graph);
    let rules = Arc::new(net.rules.build()?);
    Ok((derive_exposure_design(base, graph.clone(), rules)?, Some(graph)))
}

/// Design, moments, bound, outcomes and covariates built from a config.
pub struct SimSetup {
    pub design: DesignSpec,
    pub moments: DesignMoments,
    pub bound: VarianceBound,
    pub y: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub graph: Option<Arc<InterferenceGraph>>,
}

fn neyman_for(design: &DesignSpec) -> Result<VarianceBound> {
    match design.kind() {
        DesignKind::CompletelyRandomized { counts } if counts.len() == 2 => neyman_bound_crd(design.n(), counts[0]),
        _ => Err(Error::Config("the Neyman bound needs a two-arm completely randomized design".into())),
    }
}

impl SimSetup {
    pub fn build(cfg: &SimConfig, base_dir: &Path) -> Result<Self> {
        if cfg.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if cfg.estimators.is_empty() {
            return Err(Error::Config("no estimators listed".into()));
        }
        let (design, graph) = build_experiment_design(&cfg.design, cfg.strata_csv.as_deref(), cfg.network.as_ref(), base_dir)?;
        let (n, k) = (design.n(), design.k());
        if cfg.contrast.len() != k {
            return Err(Error::Config(format!("contrast has length {} but the design has {k} arms", cfg.contrast.len())));
        }
        let covariates = match &cfg.covariates {
            CovariateConfig::None => DMatrix::zeros(n, 0),
            CovariateConfig::Normal { p, seed } => normal_covariates(n, *p, *seed),
            CovariateConfig::Csv { path, topcode } => {
                let raw = read_covariates_csv(&resolve(base_dir, path))?;
                if raw.rows.len() != n {
                    return Err(Error::Covariates(format!("{} covariate rows for {n} units", raw.rows.len())));
                }
                preprocess_covariates(&raw, topcode)?
            }
        };
        let y = match &cfg.outcomes {
            OutcomeConfig::LogisticThreshold { intercepts, slopes, shock_seed } => {
                if intercepts.len() != k {
                    return Err(Error::Config(format!("{} intercepts for {k} arms", intercepts.len())));
                }
                impute_potential_outcomes(&covariates, slopes, intercepts, *shock_seed)?
            }
            OutcomeConfig::PotentialCsv { path } => {
                let (_, y, arms) = read_potential_csv(&resolve(base_dir, path))?;
                if arms != k || y.len() != n * k {
                    return Err(Error::Config(format!("potential outcomes are {arms} arms over {} cells", y.len())));
                }
                y
            }
        };
        let moments = moments_auto(&design, cfg.moments.mc_reps, cfg.moments.seed)?;
        let bound = match cfg.bound {
            BoundChoice::AronowSamii => aronow_samii_bound(&moments, None)?,
            BoundChoice::Neyman => neyman_for(&design)?,
        };
        let bound = if cfg.psd_clip { psd_clip(&bound) } else { bound };
        Ok(Self { design, moments, bound, y, covariates, graph })
    }

    /// c'μ with μ_a the average of arm a's potential outcomes.
    pub fn truth(&self, contrast: &[f64]) -> f64 {
        let n = self.design.n();
        contrast.iter().enumerate().map(|(a, c)| c * self.y.rows(a * n, n).mean()).sum()
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRecord {
    pub replication: usize,
    pub estimator: EstimatorChoice,
    pub estimate: f64,
    /// n × plug-in variance bound.
    pub bound_n: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub estimator: EstimatorChoice,
    pub replications: usize,
    pub failures: usize,
    pub bias2_n: f64,
    pub variance_n: f64,
    pub mse_n: f64,
    pub mean_bound_n: f64,
    pub coverage: f64,
    pub asy_variance_n: f64,
    pub asy_bound_n: f64,
    /// Every interval had zero width, so coverage is not informative.
    pub degenerate_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub n: usize,
    pub truth: f64,
    pub rows: Vec<MetricsRow>,
}

const METRIC_COLUMNS: [&str; 11] = [
    "estimator",
    "replications",
    "failures",
    "bias2_n",
    "variance_n",
    "mse_n",
    "mean_bound_n",
    "coverage",
    "asy_variance_n",
    "asy_bound_n",
    "degenerate_ci",
];

impl MetricsTable {
    pub fn row(&self, e: EstimatorChoice) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == e)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRIC_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.estimator.name().to_string(),
                r.replications.to_string(),
                r.failures.to_string(),
                fmt15(r.bias2_n),
                fmt15(r.variance_n),
                fmt15(r.mse_n),
                fmt15(r.mean_bound_n),
                fmt15(r.coverage),
                fmt15(r.asy_variance_n),
                fmt15(r.asy_bound_n),
                r.degenerate_ci.to_string(),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Two-decimal display table.
    pub fn display(&self) -> String {
        let mut out = format!(
            "{:<16}{:>10}{:>12}{:>10}{:>12}{:>10}{:>12}{:>12}\n",
            "estimator", "bias2xN", "varxN", "msexN", "boundxN", "coverage", "asyvarxN", "asyboundxN"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16}{:>10.2}{:>12.2}{:>10.2}{:>12.2}{:>10.2}{:>12.2}{:>12.2}\n",
                r.estimator.name(),
                r.bias2_n,
                r.variance_n,
                r.mse_n,
                r.mean_bound_n,
                r.coverage,
                r.asy_variance_n,
                r.asy_bound_n
            ));
        }
        out
    }
}

pub fn raw_records_csv(records: &[RawRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replication", "estimator", "estimate", "bound_n", "ci_low", "ci_high", "error"])?;
    let opt = |v: Option<f64>| v.map(fmt15).unwrap_or_default();
    for r in records {
        w.write_record([
            r.replication.to_string(),
            r.estimator.name().to_string(),
            fmt15(r.estimate),
            fmt15(r.bound_n),
            opt(r.ci_low),
            opt(r.ci_high),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Config(e.to_string()))
}

/// Provenance written next to the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SimMetadata {
    pub n: usize,
    pub arms: usize,
    pub replications: usize,
    pub seed: u64,
    pub moments_method: MomentMethod,
    pub truth: f64,
    pub theoretical_errors: Vec<(EstimatorChoice, String)>,
}

pub struct SimOutput {
    pub table: MetricsTable,
    pub records: Vec<RawRecord>,
    pub metadata: SimMetadata,
}

/// Aggregate per-estimator records; failures are excluded and counted.
pub fn aggregate(
    n: usize,
    truth: f64,
    estimators: &[EstimatorChoice],
    records: &[RawRecord],
    theoretical: &[(f64, f64)],
) -> MetricsTable {
    let nf = n as f64;
    let rows = estimators
        .iter()
        .zip(theoretical)
        .map(|(&e, &(asy_v, asy_b))| {
            let mine: Vec<&RawRecord> = records.iter().filter(|r| r.estimator == e).collect();
            let ok: Vec<&RawRecord> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
            let reps = ok.len();
            let rf = reps as f64;
            let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / rf;
            let variance = ok.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / rf;
            let mse = ok.iter().map(|r| (r.estimate - truth).powi(2)).sum::<f64>() / rf;
            let mean_bound = ok.iter().map(|r| r.bound_n).sum::<f64>() / rf;
            let covered = ok
                .iter()
                .filter(|r| matches!((r.ci_low, r.ci_high), (Some(lo), Some(hi)) if lo <= truth && truth <= hi))
                .count();
            let degenerate = reps > 0 && ok.iter().all(|r| matches!((r.ci_low, r.ci_high), (Some(lo), Some(hi)) if hi == lo));
            MetricsRow {
                estimator: e,
                replications: reps,
                failures: mine.len() - reps,
                bias2_n: nf * (mean - truth).powi(2),
                variance_n: nf * variance,
                mse_n: nf * mse,
                mean_bound_n: mean_bound,
                coverage: covered as f64 / rf,
                asy_variance_n: asy_v,
                asy_bound_n: asy_b,
                degenerate_ci: degenerate,
            }
        })
        .collect();
    MetricsTable { n, truth, rows }
}

fn replicate(ctx: &EstimationContext, setup: &SimSetup, estimators: &[EstimatorChoice], seed: u64, rep: usize) -> Vec<RawRecord> {
    let mut rng = draw_rng(seed, rep as u64);
    let prepared = sample_assignment(&setup.design, &mut rng)
        .and_then(|real| ExperimentData::from_potential(real, setup.y.clone(), setup.covariates.clone()));
    let optimizer_seed = rng.next_u64();
    estimators
        .iter()
        .map(|&e| {
            let result = prepared.as_ref().map_err(|err| err.to_string()).and_then(|data| {
                ctx.evaluate(e, data, optimizer_seed).map_err(|err| err.to_string())
            });
            match result {
                Ok(r) => RawRecord {
                    replication: rep,
                    estimator: e,
                    estimate: r.contrast_value,
                    bound_n: r.varbound_estimate,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    error: None,
                },
                Err(msg) => RawRecord {
                    replication: rep,
                    estimator: e,
                    estimate: f64::NAN,
                    bound_n: f64::NAN,
                    ci_low: None,
                    ci_high: None,
                    error: Some(msg),
                },
            }
        })
        .collect()
}

/// Run every replication on a pool of `workers` threads. Results depend only
/// on the config: each replication draws from its own stream (seed, rep) and
/// aggregation runs in replication order.
pub fn run_simulation(cfg: &SimConfig, base_dir: &Path, workers: usize) -> Result<SimOutput> {
    let setup = SimSetup::build(cfg, base_dir)?;
    run_with_setup(cfg, &setup, workers)
}

pub fn run_with_setup(cfg: &SimConfig, setup: &SimSetup, workers: usize) -> Result<SimOutput> {
    let mut ctx = EstimationContext::new(
        &setup.moments,
        &setup.bound,
        &cfg.contrast,
        cfg.level,
        &setup.covariates,
        cfg.linear.clone(),
        cfg.model.clone(),
    )?;
    ctx.prepare(&cfg.estimators)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<RawRecord>> = pool.install(|| {
        (0..cfg.replications).into_par_iter().map(|rep| replicate(&ctx, setup, &cfg.estimators, cfg.seed, rep)).collect()
    });
    let records: Vec<RawRecord> = per_rep.into_iter().flatten().collect();
    let mut theoretical_errors = Vec::new();
    let theoretical: Vec<(f64, f64)> = pool.install(|| {
        cfg.estimators
            .iter()
            .map(|&e| match ctx.theoretical(e, &setup.y) {
                Ok(v) => v,
                Err(err) => {
                    theoretical_errors.push((e, err.to_string()));
                    (f64::NAN, f64::NAN)
                }
            })
            .collect()
    });
    let truth = setup.truth(&cfg.contrast);
    let table = aggregate(setup.design.n(), truth, &cfg.estimators, &records, &theoretical);
    let metadata = SimMetadata {
        n: setup.design.n(),
        arms: setup.design.k(),
        replications: cfg.replications,
        seed: cfg.seed,
        moments_method: setup.moments.method,
        truth,
        theoretical_errors,
    };
    Ok(SimOutput { table, records, metadata })
}

/// Write whichever outputs the config names, relative to `base_dir`.
pub fn write_outputs(out: &SimOutput, cfg: &OutputConfig, base_dir: &Path) -> Result<()> {
    if let Some(p) = &cfg.metrics_csv {
        std::fs::write(resolve(base_dir, p), out.table.to_csv()?)?;
    }
    if let Some(p) = &cfg.raw_csv {
        std::fs::write(resolve(base_dir, p), raw_records_csv(&out.records)?)?;
    }
    if let Some(p) = &cfg.metadata_json {
        std::fs::write(resolve(base_dir, p), serde_json::to_string_pretty(&out.metadata)?)?;
    }
    Ok(())
}
