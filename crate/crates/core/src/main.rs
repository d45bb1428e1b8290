//! Command-line front end: simulate datasets, fit estimators, predict,
//! run replication studies, and compute asymptotic diagnostics.
//!
//! Configuration values use dotted names (`sim.n_bags=100`) read from
//! `--config` files and overridable on the command line as
//! `--sim.n_bags=50`. Exit codes: 0 success, 2 config error, 3 data
//! error, 4 fit failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmmil::asymptotics::{
    delta_cross_check, precision_report, sampling_distribution_check,
};
use gmmil::bmle::fit_bmle;
use gmmil::config::{em_options_from, sim_config_from, Config};
use gmmil::error::{Error, Result};
use gmmil::imle::fit_imle;
use gmmil::io;
use gmmil::metrics::{bag_positive_prob, binary_metrics, instance_level_report, PosteriorScorer};
use gmmil::model::{validate, EstimatorKind};
use gmmil::sim::{effective_truth, simulate};
use gmmil::smle::fit_smle;
use gmmil::study::{run_study, StudyConfig, StudyKind};
use gmmil::subsample::{beta_from_params, calibrate_alpha_n, design_subsample};

#[derive(Parser)]
#[command(
    name = "gmmil",
    about = "Gaussian-mixture multiple-instance learning toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Key-value config file (dotted names, one per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; sets sim.seed and study.seed unless overridden.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: GMMIL_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "gmmil_out")]
    output_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (optionally with a subsampling plan).
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also draw a subsample plan with this target fraction and
        /// emit the masked dataset.
        #[arg(long)]
        fraction: Option<f64>,
        /// Pilot bag fraction for the plan (0 = uniform scheme).
        #[arg(long, default_value_t = 1.0)]
        pilot_fraction: f64,
    },
    /// Fit an estimator to a dataset file.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset CSV path.
        #[arg(long)]
        dataset: PathBuf,
        /// Which estimator to fit.
        #[arg(long, value_parser = parse_estimator)]
        estimator: EstimatorKind,
        /// Additionally write the estimated precision matrices.
        #[arg(long)]
        with_precision: bool,
    },
    /// Score a dataset with fitted parameters and emit metric tables.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter CSV written by `fit` (or `simulate`'s truth file).
        #[arg(long)]
        params: PathBuf,
        /// Dataset CSV path.
        #[arg(long)]
        dataset: PathBuf,
        /// Classification threshold for F1/recall/precision.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Pool instances across bags instead of averaging per bag.
        #[arg(long)]
        pooled: bool,
    },
    /// Run a replication study and emit MSE tables.
    Study {
        #[command(flatten)]
        common: CommonArgs,
        /// Which study to run (study1..study4, rob_hetero_pi,
        /// rob_spatial_labels, rob_spatial_features,
        /// rob_truncated_labels).
        #[arg(long)]
        study: String,
        /// Subsample target fraction for studies that fix it.
        #[arg(long)]
        fraction: Option<f64>,
        /// Pilot bag fraction override for the SMLE pipeline.
        #[arg(long)]
        pilot_fraction: Option<f64>,
        /// Use the full-scale experiment defaults (p=50, M=1000, R=500).
        #[arg(long)]
        paper_scale: bool,
    },
    /// Precision matrices, efficiency gaps, and studentized checks.
    Asymptotics {
        #[command(flatten)]
        common: CommonArgs,
        /// Run the studentized sampling-distribution check for this
        /// estimator as well.
        #[arg(long, value_parser = parse_estimator)]
        check: Option<EstimatorKind>,
        /// Subsample target fraction for the subsample gap.
        #[arg(long)]
        fraction: Option<f64>,
    },
}

fn parse_estimator(s: &str) -> std::result::Result<EstimatorKind, String> {
    s.parse::<EstimatorKind>().map_err(|e| e.to_string())
}

/// Splits dotted-name overrides (`--sim.n_bags=50`) out of the raw
/// arguments before clap sees them.
fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg.starts_with("--")
            && arg.contains('=')
            && arg[2..arg.find('=').unwrap_or(2)].contains('.');
        if is_override {
            let body = &arg[2..];
            let (key, value) = body.split_once('=').expect("checked");
            overrides.push((key.to_string(), value.to_string()));
        } else {
            rest.push(arg);
        }
    }
    (rest, overrides)
}

fn load_config(common: &CommonArgs, overrides: &[(String, String)]) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::new(),
    };
    for (k, v) in overrides {
        cfg.set(k, v);
    }
    if let Some(seed) = common.seed {
        cfg.set("sim.seed", &seed.to_string());
        cfg.set("study.seed", &seed.to_string());
    }
    Ok(cfg)
}

fn init_threads(common: &CommonArgs) {
    let threads = common
        .threads
        .or_else(|| std::env::var("GMMIL_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // Ignore failure: the global pool may already exist (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_manifest(cfg: &Config, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.txt");
    std::fs::write(&path, cfg.manifest()).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_simulate(
    common: &CommonArgs,
    fraction: Option<f64>,
    pilot_fraction: f64,
    overrides: &[(String, String)],
) -> Result<()> {
    let cfg = load_config(common, overrides)?;
    let sim = sim_config_from(&cfg)?;
    let dataset = simulate(&sim)?;
    let truth = effective_truth(&sim)?;
    ensure_dir(&common.output_dir)?;
    io::write_dataset(&dataset, &common.output_dir.join("dataset.csv"))?;
    io::write_params(&truth, &common.output_dir.join("truth_params.csv"))?;
    write_manifest(&cfg, &common.output_dir)?;
    eprintln!(
        "simulated {} bags x {} instances (p={}, regime={}) -> {}",
        sim.n_bags,
        sim.bag_size,
        sim.p(),
        sim.regime.name(),
        common.output_dir.display()
    );
    if let Some(target) = fraction {
        let em = em_options_from(&cfg)?;
        let plan_seed = cfg.get_u64("study.seed", sim.seed)?;
        let plan = design_subsample(&dataset, pilot_fraction, target, &em, plan_seed)?;
        let masked = plan.apply_masked(&dataset)?;
        io::write_dataset(&masked, &common.output_dir.join("dataset_subsampled.csv"))?;
        let summary = format!(
            "alpha_n={}\nrealized_fraction={}\nrevealed={}\npilot_fraction={}\n",
            plan.alpha_n,
            plan.realized_fraction,
            plan.realized_count(),
            pilot_fraction
        );
        let path = common.output_dir.join("plan_summary.txt");
        std::fs::write(&path, summary).map_err(|e| Error::io(path.display().to_string(), e))?;
        eprintln!(
            "subsample plan: target {target}, realized {:.4} ({} labels revealed)",
            plan.realized_fraction,
            plan.realized_count()
        );
    }
    Ok(())
}

fn cmd_fit(
    common: &CommonArgs,
    dataset_path: &Path,
    estimator: EstimatorKind,
    with_precision: bool,
    overrides: &[(String, String)],
) -> Result<()> {
    let cfg = load_config(common, overrides)?;
    let (dataset, present) = io::read_dataset(dataset_path)?;
    let report = validate(&dataset);
    if !report.is_valid() {
        let first = &report.violations[0];
        return Err(Error::InconsistentSubsample(format!(
            "dataset fails validation ({} violations; first: {first})",
            report.violations.len()
        )));
    }
    if estimator == EstimatorKind::Smle && !present.s {
        return Err(Error::InconsistentSubsample(format!(
            "{} has no s column; the subsample-based estimator needs subsample indicators",
            dataset_path.display()
        )));
    }
    let em = em_options_from(&cfg)?;
    let fit = match estimator {
        EstimatorKind::Imle => fit_imle(&dataset)?,
        EstimatorKind::Bmle => fit_bmle(&dataset, &em)?,
        EstimatorKind::Smle => fit_smle(&dataset, &em)?,
    };
    ensure_dir(&common.output_dir)?;
    io::write_params(&fit.params, &common.output_dir.join("params.csv"))?;
    io::write_trace(&fit, &common.output_dir.join("trace.csv"))?;
    io::write_fit_summary(&fit, &cfg.manifest(), &common.output_dir.join("fit_summary.txt"))?;
    write_manifest(&cfg, &common.output_dir)?;
    eprintln!(
        "{}: converged={} iterations={} final_loglik={:?}",
        estimator.as_str(),
        fit.converged,
        fit.iterations,
        fit.loglik_trace.last()
    );
    if with_precision {
        let mc = cfg.get_usize("asym.mc_samples", 100_000)?;
        let seed = cfg.get_u64("asym.seed", 1)?;
        let target = cfg.get_f64("asym.fraction", 0.1)?;
        let beta = beta_from_params(&fit.params)?;
        let alpha_n = calibrate_alpha_n(&beta, &dataset, target)?;
        let report = precision_report(&fit.params, mc, seed, Some((alpha_n, beta)))?;
        let manifest = cfg.manifest();
        io::write_matrix(&report.omega_ins, &manifest, &common.output_dir.join("omega_ins.csv"))?;
        io::write_matrix(&report.delta_bag, &manifest, &common.output_dir.join("delta_bag.csv"))?;
        io::write_matrix(&report.delta_sub, &manifest, &common.output_dir.join("delta_sub.csv"))?;
        io::write_matrix(&report.omega_bag, &manifest, &common.output_dir.join("omega_bag.csv"))?;
        io::write_matrix(&report.omega_sub, &manifest, &common.output_dir.join("omega_sub.csv"))?;
    }
    Ok(())
}

fn cmd_predict(
    common: &CommonArgs,
    params_path: &Path,
    dataset_path: &Path,
    threshold: f64,
    pooled: bool,
    overrides: &[(String, String)],
) -> Result<()> {
    use std::io::Write as _;
    let cfg = load_config(common, overrides)?;
    let params = io::read_params(params_path)?;
    let (dataset, _present) = io::read_dataset(dataset_path)?;
    if params.p() != dataset.p {
        return Err(Error::DimensionMismatch { expected: dataset.p, got: params.p() });
    }
    let scorer = PosteriorScorer::new(&params)?;
    ensure_dir(&common.output_dir)?;
    write_manifest(&cfg, &common.output_dir)?;

    // Per-instance posteriors and per-bag positive probabilities.
    let inst_path = common.output_dir.join("instance_posteriors.csv");
    let bag_path = common.output_dir.join("bag_probs.csv");
    let mut inst_w = std::io::BufWriter::new(
        std::fs::File::create(&inst_path).map_err(|e| Error::io(inst_path.display().to_string(), e))?,
    );
    let mut bag_w = std::io::BufWriter::new(
        std::fs::File::create(&bag_path).map_err(|e| Error::io(bag_path.display().to_string(), e))?,
    );
    let mut bag_scores = Vec::with_capacity(dataset.bags.len());
    let mut bag_labels = Vec::with_capacity(dataset.bags.len());
    (|| -> std::io::Result<()> {
        writeln!(inst_w, "bag_id,instance_id,posterior")?;
        writeln!(bag_w, "bag_id,y,positive_prob")?;
        for bag in &dataset.bags {
            let posteriors: Vec<f64> = bag.instances.iter().map(|i| scorer.score(&i.x)).collect();
            for (inst, p) in bag.instances.iter().zip(&posteriors) {
                writeln!(inst_w, "{},{},{}", bag.bag_id, inst.instance_id, p)?;
            }
            let prob = bag_positive_prob(&posteriors);
            writeln!(bag_w, "{},{},{}", bag.bag_id, u8::from(bag.y), prob)?;
            bag_scores.push(prob);
            bag_labels.push(bag.y);
        }
        inst_w.flush()?;
        bag_w.flush()
    })()
    .map_err(|e| Error::io(common.output_dir.display().to_string(), e))?;

    // Metric tables.
    let metrics_path = common.output_dir.join("metrics.csv");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
    );
    let bag_metrics = binary_metrics(&bag_scores, &bag_labels, threshold)?;
    let instance = instance_level_report(&params, &dataset, threshold, pooled);
    (|| -> std::io::Result<()> {
        writeln!(w, "level,metric,value,note")?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let note = if bag_metrics.single_class { "single_class" } else { "" };
        writeln!(w, "bag,auc,{},{}", fmt_opt(bag_metrics.auc), note)?;
        writeln!(w, "bag,auprc,{},{}", fmt_opt(bag_metrics.auprc), note)?;
        writeln!(w, "bag,f1,{},", bag_metrics.f1)?;
        writeln!(w, "bag,recall,{},", bag_metrics.recall)?;
        writeln!(w, "bag,precision,{},", bag_metrics.precision)?;
        match &instance {
            Ok(rep) => {
                let note = format!("skipped_single_class={}", rep.skipped_single_class);
                writeln!(w, "instance,auc,{},{note}", fmt_opt(rep.auc))?;
                writeln!(w, "instance,auprc,{},{note}", fmt_opt(rep.auprc))?;
                writeln!(w, "instance,f1,{},", rep.f1)?;
                writeln!(w, "instance,recall,{},", rep.recall)?;
                writeln!(w, "instance,precision,{},", rep.precision)?;
            }
            Err(e) => {
                writeln!(w, "instance,auc,,unavailable: {e}")?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    eprintln!(
        "predicted {} bags; bag AUC {}",
        dataset.n_bags(),
        bag_metrics.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_study(
    common: &CommonArgs,
    study: &str,
    fraction: Option<f64>,
    pilot_fraction: Option<f64>,
    paper_scale: bool,
    overrides: &[(String, String)],
) -> Result<u8> {
    let mut cfg = load_config(common, overrides)?;
    if let Some(f) = fraction {
        cfg.set("study.fraction", &f.to_string());
    }
    if let Some(pf) = pilot_fraction {
        cfg.set("study.pilot_fraction", &pf.to_string());
    }
    let kind: StudyKind = study.parse()?;
    let study_cfg = StudyConfig::resolve(kind, &cfg, paper_scale, common.output_dir.clone())?;
    let report = run_study(&study_cfg)?;
    eprintln!(
        "{}: {} rows, {} fits, {} failed -> {}",
        kind.name(),
        report.rows.len(),
        report.total_fits,
        report.failed_fits,
        common.output_dir.display()
    );
    if report.failure_fraction() > 0.10 {
        eprintln!(
            "error: {:.1}% of fits failed (threshold 10%)",
            100.0 * report.failure_fraction()
        );
        return Ok(4);
    }
    Ok(0)
}

fn cmd_asymptotics(
    common: &CommonArgs,
    check: Option<EstimatorKind>,
    fraction: Option<f64>,
    overrides: &[(String, String)],
) -> Result<()> {
    use std::io::Write as _;
    let mut cfg = load_config(common, overrides)?;
    if let Some(f) = fraction {
        cfg.set("asym.fraction", &f.to_string());
    }
    let sim = sim_config_from(&cfg)?;
    let truth = effective_truth(&sim)?;
    let mc = cfg.get_usize("asym.mc_samples", 100_000)?;
    let seed = cfg.get_u64("asym.seed", 1)?;
    let target = cfg.get_f64("asym.fraction", 0.1)?;

    // Subsample design at the truth, calibrated on one reference draw.
    let beta = beta_from_params(&truth)?;
    let reference = simulate(&sim)?;
    let alpha_n = calibrate_alpha_n(&beta, &reference, target)?;

    ensure_dir(&common.output_dir)?;
    write_manifest(&cfg, &common.output_dir)?;
    let manifest = cfg.manifest();
    let report = precision_report(&truth, mc, seed, Some((alpha_n, beta)))?;
    io::write_matrix(&report.omega_ins, &manifest, &common.output_dir.join("omega_ins.csv"))?;
    io::write_matrix(&report.delta_bag, &manifest, &common.output_dir.join("delta_bag.csv"))?;
    io::write_matrix(&report.delta_sub, &manifest, &common.output_dir.join("delta_sub.csv"))?;
    io::write_matrix(&report.omega_bag, &manifest, &common.output_dir.join("omega_bag.csv"))?;
    io::write_matrix(&report.omega_sub, &manifest, &common.output_dir.join("omega_sub.csv"))?;

    let cross = delta_cross_check(&truth, mc.min(200_000), seed)?;
    let path = common.output_dir.join("delta_cross_check.txt");
    std::fs::write(
        &path,
        format!(
            "max_discrepancy={}\nmax_standard_error={}\nmc_samples={}\n",
            cross.max_discrepancy, cross.max_standard_error, cross.mc_samples
        ),
    )
    .map_err(|e| Error::io(path.display().to_string(), e))?;
    eprintln!(
        "precision matrices written (mc_se {:.3e}); delta cross-check discrepancy {:.3e} (se {:.3e})",
        report.mc_standard_error, cross.max_discrepancy, cross.max_standard_error
    );

    if let Some(kind) = check {
        let reps = cfg.get_usize("asym.replications", 200)?;
        let em = em_options_from(&cfg)?;
        let summary =
            sampling_distribution_check(kind, &sim, reps, seed, &em, target, mc.min(100_000))?;
        let path = common.output_dir.join("studentized.csv");
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        (|| -> std::io::Result<()> {
            for line in manifest.lines() {
                writeln!(w, "# {line}")?;
            }
            writeln!(w, "coordinate,block,mean,variance,jarque_bera")?;
            for j in 0..summary.coord_mean.len() {
                writeln!(
                    w,
                    "{j},{},{},{},{}",
                    summary.blocks[j],
                    summary.coord_mean[j],
                    summary.coord_var[j],
                    summary.jarque_bera[j]
                )?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
        let q = summary.coord_mean.len();
        let mut corr = nalgebra::DMatrix::zeros(q, q);
        corr.copy_from(&summary.correlation);
        io::write_matrix(&corr, &manifest, &common.output_dir.join("studentized_correlation.csv"))?;
        eprintln!(
            "studentized check ({}): {} ok, {} failed, max cross-block |corr| {:.3}",
            kind.as_str(),
            summary.replications_ok,
            summary.failures,
            summary.max_cross_block_corr()
        );
    }
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<u8> {
    match &cli.command {
        Command::Simulate { common, fraction, pilot_fraction } => {
            init_threads(common);
            cmd_simulate(common, *fraction, *pilot_fraction, &overrides)?;
            Ok(0)
        }
        Command::Fit { common, dataset, estimator, with_precision } => {
            init_threads(common);
            cmd_fit(common, dataset, *estimator, *with_precision, &overrides)?;
            Ok(0)
        }
        Command::Predict { common, params, dataset, threshold, pooled } => {
            init_threads(common);
            cmd_predict(common, params, dataset, *threshold, *pooled, &overrides)?;
            Ok(0)
        }
        Command::Study { common, study, fraction, pilot_fraction, paper_scale } => {
            init_threads(common);
            cmd_study(common, study, *fraction, *pilot_fraction, *paper_scale, &overrides)
        }
        Command::Asymptotics { common, check, fraction } => {
            init_threads(common);
            cmd_asymptotics(common, *check, *fraction, &overrides)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
