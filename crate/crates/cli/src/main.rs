mod checks;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use designbased::bounds::{aronow_samii_bound, certify_bound, neyman_bound_crd, psd_clip, VarianceBound, PSD_TOL};
use designbased::design::{DesignKind, DesignSpec};
use designbased::io::{
    fmt15, load_moments, read_covariates_csv, read_observed_csv, save_moments, write_pi_csv, write_triplets_csv,
};
use designbased::linear::{ExperimentData, LinearOptions};
use designbased::moments::{closed_form_moments, complexity_table, exact_moments, mc_moments, moments_auto, DesignMoments};
use designbased::network::positivity_report;
use designbased::pipeline::{EstimationContext, EstimatorChoice, ModelConfig};
use designbased::sim::{preprocess_covariates, run_simulation, write_outputs, DesignFile, SimConfig};
use designbased::{Error, Result};
use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "designbased", version, about = "Design-based estimation for randomized experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute inclusion probabilities and the first-order design matrix.
    Moments {
        #[command(flatten)]
        source: MomentSource,
        /// Write pi.csv, p.csv and d.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Save the moments in binary form for later commands.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Largest eigenvalues of D and of D with its diagonal removed, per arm and arm pair.
    Complexity {
        #[command(flatten)]
        source: MomentSource,
        #[arg(long)]
        json: bool,
    },
    /// Build a variance bound and certify it against the design.
    Bound {
        #[command(flatten)]
        source: MomentSource,
        #[arg(long, value_enum, default_value = "aronow-samii")]
        kind: BoundArg,
        #[arg(long)]
        psd_clip: bool,
        /// Write the bound matrix as `i,j,value` triplets.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate contrasts on one observed dataset and print a JSON report.
    Estimate(EstimateArgs),
    /// Run a simulation config and write the metric table.
    Simulate {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the metrics path from the config.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long)]
        raw_csv: Option<PathBuf>,
        #[arg(long)]
        metadata_json: Option<PathBuf>,
    },
    /// Run built-in oracle checks on small designs.
    Check,
}

#[derive(Args)]
struct MomentSource {
    /// TOML file with a `[design]` table and optional `strata_csv` and `[network]`.
    #[arg(long)]
    design: PathBuf,
    /// Require exact moments.
    #[arg(long, conflicts_with_all = ["mc", "moments"])]
    exact: bool,
    /// Monte Carlo draws.
    #[arg(long, conflicts_with = "moments")]
    mc: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Previously saved moments.
    #[arg(long)]
    moments: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundArg {
    AronowSamii,
    Neyman,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    source: MomentSource,
    /// `unit_id,arm,y`, one row per unit in design order; arms start at 1.
    #[arg(long)]
    observed: PathBuf,
    /// `unit_id,x1..xp`, matched to the observed rows by unit id.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Covariate columns capped at 5 standard deviations.
    #[arg(long, value_delimiter = ',')]
    topcode: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    estimators: Vec<EstimatorChoice>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    contrast: Vec<f64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value = "aronow-samii")]
    bound: BoundArg,
    #[arg(long)]
    psd_clip: bool,
    /// TOML with optional `[linear]` and `[model]` tables.
    #[arg(long)]
    options: Option<PathBuf>,
    /// Seed for optimizer restarts.
    #[arg(long, default_value_t = 0)]
    optimizer_seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct EstimateOptions {
    linear: LinearOptions,
    model: ModelConfig,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

struct Loaded {
    design: DesignSpec,
    file: DesignFile,
    moments: DesignMoments,
}

fn load(source: &MomentSource) -> Result<Loaded> {
    let file = DesignFile::load(&source.design)?;
    let (design, _) = file.build(&base_dir(&source.design))?;
    let moments = if let Some(path) = &source.moments {
        let m = load_moments(path)?;
        if m.n() != design.n() || m.k() != design.k() {
            return Err(Error::Dimension(format!("saved moments are {}×{}, design is {}×{}", m.n(), m.k(), design.n(), design.k())));
        }
        m
    } else if source.exact {
        match exact_moments(&design) {
            Err(Error::SupportTooLarge { .. }) | Err(Error::NotEnumerable(_)) => closed_form_moments(&design)?,
            other => other?,
        }
    } else if let Some(reps) = source.mc {
        mc_moments(&design, reps, source.seed)?
    } else {
        moments_auto(&design, 200_000, source.seed)?
    };
    Ok(Loaded { design, file, moments })
}

fn arm_names(file: &DesignFile, k: usize) -> Vec<String> {
    file.network
        .as_ref()
        .and_then(|net| net.rules.build().ok())
        .map(|rules| rules.names())
        .unwrap_or_else(|| (1..=k).map(|a| format!("arm{a}")).collect())
}

fn build_bound(loaded: &Loaded, kind: BoundArg, clip: bool) -> Result<VarianceBound> {
    let bound = match kind {
        BoundArg::AronowSamii => aronow_samii_bound(&loaded.moments, None)?,
        BoundArg::Neyman => match loaded.design.kind() {
            DesignKind::CompletelyRandomized { counts } if counts.len() == 2 => neyman_bound_crd(loaded.design.n(), counts[0])?,
            _ => return Err(Error::InvalidArgument("the Neyman bound needs a two-arm completely randomized design".into())),
        },
    };
    Ok(if clip { psd_clip(&bound) } else { bound })
}

/// Write to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn render_table(names: &[String], table: &DMatrix<f64>) -> String {
    let width = names.iter().map(String::len).max().unwrap_or(4).max(10);
    let mut out = format!("{:width$}", "");
    for name in names {
        out.push_str(&format!(" {name:>width$}"));
    }
    out.push('\n');
    for (a, name) in names.iter().enumerate() {
        out.push_str(&format!("{name:width$}"));
        for b in 0..names.len() {
            out.push_str(&format!(" {:>width$.2}", table[(a, b)]));
        }
        out.push('\n');
    }
    out
}

fn cmd_moments(source: &MomentSource, out_dir: Option<&Path>, save: Option<&Path>) -> Result<()> {
    let loaded = load(source)?;
    let m = &loaded.moments;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_pi_csv(&dir.join("pi.csv"), m)?;
        write_triplets_csv(&dir.join("p.csv"), &m.p)?;
        write_triplets_csv(&dir.join("d.csv"), &m.d)?;
    }
    if let Some(path) = save {
        save_moments(path, m)?;
    }
    let positivity = positivity_report(m, 0.0);
    print_json(&serde_json::json!({
        "n": m.n(),
        "arms": m.k(),
        "method": m.method,
        "min_pi": m.pi.min(),
        "zero_cells": m.zero_mask.iter().filter(|z| **z).count(),
        "proven_zero_cells": m.proven_zero.iter().filter(|z| **z).count(),
        "positivity": positivity,
    }))
}

fn cmd_complexity(source: &MomentSource, json: bool) -> Result<()> {
    let loaded = load(source)?;
    let names = arm_names(&loaded.file, loaded.moments.k());
    let (full, full_warn) = complexity_table(&loaded.moments, false)?;
    let (offdiag, off_warn) = complexity_table(&loaded.moments, true)?;
    if json {
        let rows = |t: &DMatrix<f64>| -> Vec<Vec<String>> {
            (0..t.nrows()).map(|a| (0..t.ncols()).map(|b| fmt15(t[(a, b)])).collect()).collect()
        };
        return print_json(&serde_json::json!({
            "arms": names,
            "design_matrix": rows(&full),
            "without_diagonal": rows(&offdiag),
            "warnings": full_warn.into_iter().chain(off_warn).collect::<Vec<_>>(),
        }));
    }
    emit(&format!(
        "largest eigenvalue of D\n{}\nlargest eigenvalue of D with zero diagonal\n{}",
        render_table(&names, &full),
        render_table(&names, &offdiag)
    ))?;
    for w in full_warn.iter().chain(&off_warn) {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_bound(source: &MomentSource, kind: BoundArg, clip: bool, out: Option<&Path>) -> Result<bool> {
    let loaded = load(source)?;
    let bound = build_bound(&loaded, kind, clip)?;
    let cert = certify_bound(&loaded.moments, &bound, PSD_TOL)?;
    if let Some(path) = out {
        write_triplets_csv(path, &bound.dt)?;
    }
    print_json(&serde_json::json!({ "kind": bound.kind, "psd_clipped": bound.psd_clipped, "certificate": cert }))?;
    Ok(cert.valid)
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let loaded = load(&args.source)?;
    let (n, k) = (loaded.design.n(), loaded.design.k());
    let observed = read_observed_csv(&args.observed)?;
    if observed.y.len() != n {
        return Err(Error::Dimension(format!("{} observed rows for {n} design units", observed.y.len())));
    }
    let covariates = match &args.covariates {
        Some(path) => preprocess_covariates(&read_covariates_csv(path)?.aligned(&observed.unit_ids)?, &args.topcode)?,
        None => DMatrix::zeros(n, 0),
    };
    let options: EstimateOptions = match &args.options {
        Some(path) => toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?,
        None => EstimateOptions::default(),
    };
    let bound = build_bound(&loaded, args.bound, args.psd_clip)?;
    let mut ctx = EstimationContext::new(&loaded.moments, &bound, &args.contrast, args.level, &covariates, options.linear, options.model)?;
    ctx.prepare(&args.estimators)?;
    let data = ExperimentData::new(observed.realization(k)?, observed.y_vector(), covariates.clone())?;
    let mut reports = Vec::new();
    for &e in &args.estimators {
        reports.push(ctx.evaluate(e, &data, args.optimizer_seed)?);
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "n": n, "arms": k, "moments": loaded.moments.method, "estimates": reports }))?;
    match &args.output {
        Some(path) => fs::write(path, text)?,
        None => emit(&(text + "\n"))?,
    }
    Ok(())
}

fn cmd_simulate(config: &Path, workers: usize, overrides: [Option<PathBuf>; 3]) -> Result<()> {
    let mut cfg = SimConfig::load(config)?;
    let [metrics, raw, meta] = overrides;
    cfg.output.metrics_csv = metrics.or(cfg.output.metrics_csv);
    cfg.output.raw_csv = raw.or(cfg.output.raw_csv);
    cfg.output.metadata_json = meta.or(cfg.output.metadata_json);
    let base = base_dir(config);
    let out = run_simulation(&cfg, &base, workers)?;
    write_outputs(&out, &cfg.output, &base)?;
    emit(&out.table.display())?;
    for row in out.table.rows.iter().filter(|r| r.failures > 0) {
        eprintln!("warning: {} failed in {} replications", row.estimator, row.failures);
    }
    for (e, msg) in &out.metadata.theoretical_errors {
        eprintln!("warning: no theoretical variance for {e}: {msg}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Moments { source, out_dir, save } => cmd_moments(&source, out_dir.as_deref(), save.as_deref()).map(|_| true),
        Command::Complexity { source, json } => cmd_complexity(&source, json).map(|_| true),
        Command::Bound { source, kind, psd_clip, out } => cmd_bound(&source, kind, psd_clip, out.as_deref()),
        Command::Estimate(args) => cmd_estimate(&args).map(|_| true),
        Command::Simulate { config, workers, metrics_csv, raw_csv, metadata_json } => {
            cmd_simulate(&config, workers, [metrics_csv, raw_csv, metadata_json]).map(|_| true)
        }
        Command::Check => {
            let outcomes = checks::run_all()?;
            let lines: String = outcomes
                .iter()
                .map(|o| format!("{} {}: {}\n", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail))
                .collect();
            emit(&lines)?;
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
