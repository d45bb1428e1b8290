//! Replication studies and their CSV reports.
//!
//! Four efficiency studies sweep one quantity each (covariance scale,
//! subsampling fraction, bag count, pilot fraction) and four robustness
//! studies sweep the bag count under a mis-specified generator. Every
//! replication owns an independent seed substream shared across grid
//! points, so curves use common random numbers and re-runs are
//! byte-identical regardless of the thread count. Fit failures are
//! recorded per row and never abort a study.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bmle::{fit_bmle, EmOptions};
use crate::config::{em_options_from, sim_config_from, Config};
use crate::error::{Error, Result};
use crate::imle::fit_imle;
use crate::metrics::{block_squared_errors, BLOCK_NAMES, LOG_MSE_FLOOR};
use crate::model::{FitResult, ModelParams};
use crate::rng::{child_seed, Stream};
use crate::sim::{
    effective_truth, simulate, SimConfig,
};
use crate::smle::fit_smle;
use crate::subsample::{beta_from_fit, beta_from_params, calibrate_alpha_n, draw_subsample, pilot_beta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Study1Sigma,
    Study2Fraction,
    Study3SampleSize,
    Study4Pilot,
    RobHeteroPi,
    RobSpatialLabels,
    RobSpatialFeatures,
    RobTruncatedLabels,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Study1Sigma => "study1_sigma",
            StudyKind::Study2Fraction => "study2_fraction",
            StudyKind::Study3SampleSize => "study3_sample_size",
            StudyKind::Study4Pilot => "study4_pilot",
            StudyKind::RobHeteroPi => "rob_hetero_pi",
            StudyKind::RobSpatialLabels => "rob_spatial_labels",
            StudyKind::RobSpatialFeatures => "rob_spatial_features",
            StudyKind::RobTruncatedLabels => "rob_truncated_labels",
        }
    }

    pub fn estimators(self) -> &'static [&'static str] {
        match self {
            StudyKind::Study1Sigma => &["imle", "bmle"],
            StudyKind::Study2Fraction
            | StudyKind::Study3SampleSize
            | StudyKind::RobHeteroPi
            | StudyKind::RobSpatialLabels
            | StudyKind::RobSpatialFeatures
            | StudyKind::RobTruncatedLabels => &["imle", "bmle", "smle"],
            StudyKind::Study4Pilot => &["smle"],
        }
    }

    fn desk_grid(self) -> Vec<f64> {
        match self {
            StudyKind::Study1Sigma => vec![1.0, 2.0, 4.0],
            StudyKind::Study2Fraction => vec![0.001, 0.01, 0.1, 0.5, 0.99],
            StudyKind::Study3SampleSize => vec![50.0, 100.0, 200.0],
            StudyKind::Study4Pilot => vec![0.0, 0.1, 0.5, 1.0, f64::INFINITY],
            _ => vec![50.0, 200.0],
        }
    }

    fn paper_grid(self) -> Vec<f64> {
        match self {
            StudyKind::Study1Sigma => vec![0.5, 1.0, 2.0, 4.0, 8.0],
            StudyKind::Study2Fraction => vec![0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 0.8, 0.99],
            StudyKind::Study3SampleSize => vec![50.0, 100.0, 200.0, 400.0],
            StudyKind::Study4Pilot => vec![0.0, 0.1, 0.5, 1.0, f64::INFINITY],
            _ => vec![50.0, 100.0, 200.0, 400.0],
        }
    }

    fn robustness_regime(self) -> Option<&'static str> {
        match self {
            StudyKind::RobHeteroPi => Some("hetero_pi"),
            StudyKind::RobSpatialLabels => Some("spatial_labels"),
            StudyKind::RobSpatialFeatures => Some("spatial_features"),
            StudyKind::RobTruncatedLabels => Some("truncated_labels"),
            _ => None,
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "study1" | "study1_sigma" | "sigma" => Ok(StudyKind::Study1Sigma),
            "study2" | "study2_fraction" | "fraction" => Ok(StudyKind::Study2Fraction),
            "study3" | "study3_sample_size" | "sample_size" => Ok(StudyKind::Study3SampleSize),
            "study4" | "study4_pilot" | "pilot" => Ok(StudyKind::Study4Pilot),
            "rob_hetero_pi" | "hetero_pi" => Ok(StudyKind::RobHeteroPi),
            "rob_spatial_labels" | "spatial_labels" => Ok(StudyKind::RobSpatialLabels),
            "rob_spatial_features" | "spatial_features" => Ok(StudyKind::RobSpatialFeatures),
            "rob_truncated_labels" | "truncated_labels" => Ok(StudyKind::RobTruncatedLabels),
            other => Err(Error::Config(format!("unknown study kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub replications: usize,
    pub grid: Vec<f64>,
    pub base: SimConfig,
    pub em: EmOptions,
    /// Subsample target fraction for studies that fix it.
    pub fraction: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Echo of the resolved configuration, embedded in every report.
    pub manifest: String,
}

impl StudyConfig {
    /// Resolves a study from dotted config keys. `paper_scale` switches
    /// grid and size defaults to the full-scale experiment; explicit
    /// keys always win.
    pub fn resolve(kind: StudyKind, cfg: &Config, paper_scale: bool, output_dir: PathBuf) -> Result<Self> {
        let mut merged = cfg.clone();
        let default = |m: &mut Config, key: &str, value: String| {
            if m.get(key).is_none() {
                m.set(key, &value);
            }
        };
        if paper_scale {
            default(&mut merged, "sim.p", "50".into());
            default(&mut merged, "sim.n_bags", "100".into());
            default(&mut merged, "sim.bag_size", "1000".into());
            default(&mut merged, "study.replications", "500".into());
        } else {
            default(&mut merged, "sim.p", "5".into());
            default(&mut merged, "sim.n_bags", "100".into());
            default(&mut merged, "sim.bag_size", "200".into());
        }
        if let Some(regime) = kind.robustness_regime() {
            default(&mut merged, "sim.regime", regime.into());
        }
        default(&mut merged, "study.kind", kind.name().into());

        let base = sim_config_from(&merged)?;
        let em = em_options_from(&merged)?;
        let grid = match merged.get_list_f64("study.grid")? {
            Some(g) if !g.is_empty() => g,
            Some(_) => return Err(Error::Config("study.grid is empty".into())),
            None => {
                if paper_scale {
                    kind.paper_grid()
                } else {
                    kind.desk_grid()
                }
            }
        };
        let default_reps = if paper_scale {
            500
        } else if kind == StudyKind::Study1Sigma {
            100
        } else {
            50
        };
        let replications = merged.get_usize("study.replications", default_reps)?;
        if replications == 0 {
            return Err(Error::Config("study.replications must be >= 1".into()));
        }
        let fraction = merged.get_f64("study.fraction", 0.1)?;
        let seed = merged.get_u64("study.seed", base.seed)?;
        // Freeze the fully resolved values into the manifest.
        merged.set("study.replications", &replications.to_string());
        merged.set("study.fraction", &fraction.to_string());
        merged.set("study.seed", &seed.to_string());
        merged.set(
            "study.grid",
            &grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
        );
        merged.set("study.paper_scale", if paper_scale { "true" } else { "false" });
        let manifest = merged.manifest();
        Ok(StudyConfig {
            kind,
            replications,
            grid,
            base,
            em,
            fraction,
            seed,
            output_dir,
            manifest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StudyRow {
    pub grid_index: usize,
    pub grid_value: f64,
    pub replication: usize,
    pub estimator: &'static str,
    pub block: &'static str,
    /// Dimension-normalized squared error; absent when the fit failed.
    pub squared_error: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct PlotRow {
    pub grid_value: f64,
    pub estimator: &'static str,
    pub block: &'static str,
    pub mse: f64,
    pub log_mse: f64,
    /// Delta-method standard error of `log_mse`.
    pub mc_se_log: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub rows: Vec<StudyRow>,
    pub plot: Vec<PlotRow>,
    pub manifest: String,
    pub total_fits: usize,
    pub failed_fits: usize,
}

impl StudyReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.total_fits == 0 {
            0.0
        } else {
            self.failed_fits as f64 / self.total_fits as f64
        }
    }
}

/// Fit outcomes of one replication at one grid point.
type FitOutcome = (usize, &'static str, std::result::Result<ModelParams, String>);

fn estimator_order(name: &str) -> usize {
    match name {
        "imle" => 0,
        "bmle" => 1,
        _ => 2,
    }
}

fn fit_to_outcome(
    grid_index: usize,
    name: &'static str,
    fit: Result<FitResult>,
) -> FitOutcome {
    match fit {
        Ok(f) => (grid_index, name, Ok(f.params)),
        Err(e) => (grid_index, name, Err(error_tag(&e))),
    }
}

fn error_tag(e: &Error) -> String {
    let full = e.to_string();
    let brief: String = full.split(':').next().unwrap_or("error").chars().take(60).collect();
    brief.replace(',', ";")
}

/// Runs one replication and returns `(grid_index, estimator, outcome)`
/// triples plus the per-grid truth parameters.
fn run_replication(cfg: &StudyConfig, rep: usize) -> (Vec<FitOutcome>, Vec<ModelParams>) {
    let rep_seed = child_seed(cfg.seed, Stream::Replication, rep as u64);
    let mut outcomes = Vec::new();
    let mut truths = Vec::new();

    match cfg.kind {
        StudyKind::Study1Sigma => {
            for (gi, &scale) in cfg.grid.iter().enumerate() {
                let mut sim = cfg.base.clone();
                sim.sigma_scale = scale;
                sim.seed = rep_seed;
                truths.push(effective_truth(&sim).expect("validated config"));
                match simulate(&sim) {
                    Ok(ds) => {
                        outcomes.push(fit_to_outcome(gi, "imle", fit_imle(&ds)));
                        outcomes.push(fit_to_outcome(gi, "bmle", fit_bmle(&ds, &cfg.em)));
                    }
                    Err(e) => {
                        outcomes.push((gi, "imle", Err(error_tag(&e))));
                        outcomes.push((gi, "bmle", Err(error_tag(&e))));
                    }
                }
            }
        }
        StudyKind::Study2Fraction => {
            let mut sim = cfg.base.clone();
            sim.seed = rep_seed;
            let truth = effective_truth(&sim).expect("validated config");
            for _ in &cfg.grid {
                truths.push(truth.clone());
            }
            let ds = match simulate(&sim) {
                Ok(ds) => ds,
                Err(e) => {
                    for gi in 0..cfg.grid.len() {
                        for name in ["imle", "bmle", "smle"] {
                            outcomes.push((gi, name, Err(error_tag(&e))));
                        }
                    }
                    return (outcomes, truths);
                }
            };
            let imle = fit_imle(&ds);
            let bmle = fit_bmle(&ds, &cfg.em);
            for (gi, &fraction) in cfg.grid.iter().enumerate() {
                outcomes.push(fit_to_outcome(
                    gi,
                    "imle",
                    imle.as_ref().map(|f| f.clone()).map_err(clone_error),
                ));
                outcomes.push(fit_to_outcome(
                    gi,
                    "bmle",
                    bmle.as_ref().map(|f| f.clone()).map_err(clone_error),
                ));
                // Pilot direction reuses the full-sample bag fit.
                let smle = bmle
                    .as_ref()
                    .map_err(clone_error)
                    .and_then(beta_from_fit)
                    .and_then(|beta| {
                        let alpha_n = calibrate_alpha_n(&beta, &ds, fraction)?;
                        let plan = draw_subsample(
                            &ds,
                            alpha_n,
                            &beta,
                            child_seed(rep_seed, Stream::Subsample, gi as u64),
                        )?;
                        fit_smle(&plan.apply(&ds)?, &cfg.em)
                    });
                outcomes.push(fit_to_outcome(gi, "smle", smle));
            }
        }
        StudyKind::Study3SampleSize
        | StudyKind::RobHeteroPi
        | StudyKind::RobSpatialLabels
        | StudyKind::RobSpatialFeatures
        | StudyKind::RobTruncatedLabels => {
            for (gi, &n) in cfg.grid.iter().enumerate() {
                let mut sim = cfg.base.clone();
                sim.n_bags = n as usize;
                sim.seed = rep_seed;
                truths.push(effective_truth(&sim).expect("validated config"));
                match simulate(&sim) {
                    Ok(ds) => {
                        outcomes.push(fit_to_outcome(gi, "imle", fit_imle(&ds)));
                        let bmle = fit_bmle(&ds, &cfg.em);
                        let smle = bmle
                            .as_ref()
                            .map_err(clone_error)
                            .and_then(beta_from_fit)
                            .and_then(|beta| {
                                let alpha_n = calibrate_alpha_n(&beta, &ds, cfg.fraction)?;
                                let plan = draw_subsample(
                                    &ds,
                                    alpha_n,
                                    &beta,
                                    child_seed(rep_seed, Stream::Subsample, gi as u64),
                                )?;
                                fit_smle(&plan.apply(&ds)?, &cfg.em)
                            });
                        outcomes.push(fit_to_outcome(gi, "bmle", bmle));
                        outcomes.push(fit_to_outcome(gi, "smle", smle));
                    }
                    Err(e) => {
                        for name in ["imle", "bmle", "smle"] {
                            outcomes.push((gi, name, Err(error_tag(&e))));
                        }
                    }
                }
            }
        }
        StudyKind::Study4Pilot => {
            let mut sim = cfg.base.clone();
            sim.seed = rep_seed;
            let truth = effective_truth(&sim).expect("validated config");
            for _ in &cfg.grid {
                truths.push(truth.clone());
            }
            let ds = match simulate(&sim) {
                Ok(ds) => ds,
                Err(e) => {
                    for gi in 0..cfg.grid.len() {
                        outcomes.push((gi, "smle", Err(error_tag(&e))));
                    }
                    return (outcomes, truths);
                }
            };
            for (gi, &pf) in cfg.grid.iter().enumerate() {
                let smle = (|| {
                    let beta = if pf.is_infinite() {
                        beta_from_params(&truth)?
                    } else {
                        pilot_beta(&ds, pf, &cfg.em, child_seed(rep_seed, Stream::Pilot, gi as u64))?
                    };
                    let alpha_n = calibrate_alpha_n(&beta, &ds, cfg.fraction)?;
                    let plan = draw_subsample(
                        &ds,
                        alpha_n,
                        &beta,
                        child_seed(rep_seed, Stream::Subsample, gi as u64),
                    )?;
                    fit_smle(&plan.apply(&ds)?, &cfg.em)
                })();
                outcomes.push(fit_to_outcome(gi, "smle", smle));
            }
        }
    }
    (outcomes, truths)
}

fn clone_error(e: &Error) -> Error {
    Error::Config(error_tag(e))
}

/// Runs all replications, aggregates MSE rows, and writes the report to
/// `output_dir` (`study_rows.csv`, `plot_data.csv`, `manifest.txt`).
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let per_rep: Vec<(Vec<FitOutcome>, Vec<ModelParams>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep))
        .collect();

    let mut rows: Vec<StudyRow> = Vec::new();
    let mut total_fits = 0usize;
    let mut failed_fits = 0usize;
    for (rep, (outcomes, truths)) in per_rep.iter().enumerate() {
        for (gi, estimator, outcome) in outcomes {
            total_fits += 1;
            match outcome {
                Ok(params) => match block_squared_errors(params, &truths[*gi]) {
                    Ok(errors) => {
                        for block in BLOCK_NAMES {
                            rows.push(StudyRow {
                                grid_index: *gi,
                                grid_value: cfg.grid[*gi],
                                replication: rep,
                                estimator,
                                block,
                                squared_error: errors.get(block),
                                status: "ok".into(),
                            });
                        }
                    }
                    Err(e) => {
                        failed_fits += 1;
                        push_error_rows(&mut rows, cfg, *gi, rep, estimator, &error_tag(&e));
                    }
                },
                Err(tag) => {
                    failed_fits += 1;
                    push_error_rows(&mut rows, cfg, *gi, rep, estimator, tag);
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.grid_index, a.replication, estimator_order(a.estimator), block_order(a.block)).cmp(&(
            b.grid_index,
            b.replication,
            estimator_order(b.estimator),
            block_order(b.block),
        ))
    });

    let plot = aggregate(cfg, &rows);
    let report = StudyReport {
        kind: cfg.kind,
        rows,
        plot,
        manifest: cfg.manifest.clone(),
        total_fits,
        failed_fits,
    };
    write_report(&report, &cfg.output_dir)?;
    Ok(report)
}

fn block_order(block: &str) -> usize {
    BLOCK_NAMES.iter().position(|b| *b == block).unwrap_or(BLOCK_NAMES.len())
}

fn push_error_rows(
    rows: &mut Vec<StudyRow>,
    cfg: &StudyConfig,
    gi: usize,
    rep: usize,
    estimator: &'static str,
    tag: &str,
) {
    for block in BLOCK_NAMES {
        rows.push(StudyRow {
            grid_index: gi,
            grid_value: cfg.grid[gi],
            replication: rep,
            estimator,
            block,
            squared_error: None,
            status: format!("error:{tag}"),
        });
    }
}

fn aggregate(cfg: &StudyConfig, rows: &[StudyRow]) -> Vec<PlotRow> {
    let mut plot = Vec::new();
    for (gi, &gv) in cfg.grid.iter().enumerate() {
        for estimator in cfg.kind.estimators() {
            for block in BLOCK_NAMES {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| {
                        r.grid_index == gi && r.estimator == *estimator && r.block == block
                    })
                    .filter_map(|r| r.squared_error)
                    .collect();
                let n = vals.len();
                if n == 0 {
                    plot.push(PlotRow {
                        grid_value: gv,
                        estimator,
                        block,
                        mse: f64::NAN,
                        log_mse: f64::NAN,
                        mc_se_log: f64::NAN,
                        n_ok: 0,
                    });
                    continue;
                }
                let mse = vals.iter().sum::<f64>() / n as f64;
                let log_mse = if mse > 0.0 { mse.ln() } else { LOG_MSE_FLOOR };
                let var = if n > 1 {
                    vals.iter().map(|v| (v - mse) * (v - mse)).sum::<f64>() / (n as f64 - 1.0)
                } else {
                    0.0
                };
                let mc_se_log = if mse > 0.0 { (var / n as f64).sqrt() / mse } else { f64::NAN };
                plot.push(PlotRow { grid_value: gv, estimator, block, mse, log_mse, mc_se_log, n_ok: n });
            }
        }
    }
    plot
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_report(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, &report.manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let rows_path = dir.join("study_rows.csv");
    let file =
        std::fs::File::create(&rows_path).map_err(|e| Error::io(rows_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for line in report.manifest.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "grid_value,replication,estimator,block,mse,log_mse,status")?;
        for r in &report.rows {
            let (mse, log_mse) = match r.squared_error {
                Some(v) => {
                    let lv = if v > 0.0 { v.ln() } else { LOG_MSE_FLOOR };
                    (fmt(v), fmt(lv))
                }
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt(r.grid_value),
                r.replication,
                r.estimator,
                r.block,
                mse,
                log_mse,
                r.status
            )?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(rows_path.display().to_string(), e))?;

    let plot_path = dir.join("plot_data.csv");
    let file =
        std::fs::File::create(&plot_path).map_err(|e| Error::io(plot_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for line in report.manifest.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "grid_value,estimator,block,mse,log_mse,mc_se_log,n_ok")?;
        for r in &report.plot {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt(r.grid_value),
                r.estimator,
                r.block,
                fmt(r.mse),
                fmt(r.log_mse),
                fmt(r.mc_se_log),
                r.n_ok
            )?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(plot_path.display().to_string(), e))
}
