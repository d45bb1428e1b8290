//! End-to-end checks of the command-line interface: the
//! simulate -> fit -> predict pipeline, exit codes, and byte-identical
//! reruns across thread counts.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmmil"))
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gmmil-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate_into(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--output-dir",
        dir.to_str().unwrap(),
        "--seed",
        "21",
        "--sim.p=2",
        "--sim.n_bags=40",
        "--sim.bag_size=60",
        "--sim.alpha=0.5",
        "--sim.pi=0.15",
        "--sim.separation=4",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn fit_recovers_truth_at_mc_scale() {
    let dir = work_dir("fit_truth");
    simulate_into(&dir, &[]);
    let data = dir.join("dataset.csv");
    let truth = gmmil::io::read_params(&dir.join("truth_params.csv")).unwrap();

    for estimator in ["imle", "bmle"] {
        let out = dir.join(format!("fit_{estimator}"));
        run_ok(&[
            "fit",
            "--dataset",
            data.to_str().unwrap(),
            "--estimator",
            estimator,
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        let params = gmmil::io::read_params(&out.join("params.csv")).unwrap();
        // Monte-Carlo scale: sqrt of the dominant variance term.
        let n_inst = 40.0 * 60.0;
        let scale = 1.0 / (n_inst * truth.pi).sqrt();
        assert!(
            (&params.mu1 - &truth.mu1).amax() < 6.0 * scale,
            "{estimator}: mu1 {:?} vs {:?}",
            params.mu1,
            truth.mu1
        );
        assert!((params.pi - truth.pi).abs() < 6.0 * scale);
    }
}

#[test]
fn smle_requires_subsample_column() {
    let dir = work_dir("no_s_column");
    // A file without an `s` column loads fine but cannot drive the
    // subsample-based estimator.
    let path = dir.join("plain.csv");
    std::fs::write(
        &path,
        "bag_id,instance_id,y,a,x0\nb0,i0,1,1,2.0\nb0,i1,1,0,0.1\nb1,i0,0,0,-0.2\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "fit",
            "--dataset",
            path.to_str().unwrap(),
            "--estimator",
            "smle",
            "--output-dir",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "expected data-error exit");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("subsample"), "stderr: {stderr}");
}

#[test]
fn predict_with_oracle_params_separates_bags() {
    let dir = work_dir("predict_oracle");
    simulate_into(&dir, &[]);
    let pred = dir.join("pred");
    run_ok(&[
        "predict",
        "--params",
        dir.join("truth_params.csv").to_str().unwrap(),
        "--dataset",
        dir.join("dataset.csv").to_str().unwrap(),
        "--output-dir",
        pred.to_str().unwrap(),
    ]);
    let metrics = std::fs::read_to_string(pred.join("metrics.csv")).unwrap();
    let bag_auc: f64 = metrics
        .lines()
        .find(|l| l.starts_with("bag,auc"))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(bag_auc >= 0.99, "bag AUC {bag_auc}");

    // Posterior column stays within [0,1].
    let posts = std::fs::read_to_string(pred.join("instance_posteriors.csv")).unwrap();
    for line in posts.lines().skip(1) {
        let p: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p), "posterior {p}");
    }
}

#[test]
fn predict_all_negative_flags_single_class() {
    let dir = work_dir("predict_negative");
    simulate_into(&dir, &["--sim.alpha=0"]);
    let pred = dir.join("pred");
    run_ok(&[
        "predict",
        "--params",
        dir.join("truth_params.csv").to_str().unwrap(),
        "--dataset",
        dir.join("dataset.csv").to_str().unwrap(),
        "--output-dir",
        pred.to_str().unwrap(),
    ]);
    let metrics = std::fs::read_to_string(pred.join("metrics.csv")).unwrap();
    let auc_line = metrics.lines().find(|l| l.starts_with("bag,auc")).unwrap();
    assert!(auc_line.ends_with("single_class"), "line: {auc_line}");
}

#[test]
fn subsampled_simulation_fits_smle_end_to_end() {
    let dir = work_dir("smle_pipeline");
    simulate_into(&dir, &["--fraction", "0.2"]);
    let masked = dir.join("dataset_subsampled.csv");
    assert!(masked.exists());
    let out = dir.join("fit_smle");
    run_ok(&[
        "fit",
        "--dataset",
        masked.to_str().unwrap(),
        "--estimator",
        "smle",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    let summary = std::fs::read_to_string(out.join("fit_summary.txt")).unwrap();
    assert!(summary.contains("estimator=smle"));
    assert!(summary.contains("converged=true"));
}

#[test]
fn study_output_is_thread_count_invariant() {
    let dir1 = work_dir("threads1");
    let dir2 = work_dir("threads2");
    for (dir, threads) in [(&dir1, "1"), (&dir2, "2")] {
        run_ok(&[
            "study",
            "--study",
            "study1",
            "--output-dir",
            dir.to_str().unwrap(),
            "--threads",
            threads,
            "--seed",
            "31",
            "--sim.p=2",
            "--sim.n_bags=16",
            "--sim.bag_size=12",
            "--sim.alpha=0.5",
            "--sim.pi=0.2",
            "--study.replications=3",
            "--study.grid=1,2",
        ]);
    }
    let a = std::fs::read(dir1.join("study_rows.csv")).unwrap();
    let b = std::fs::read(dir2.join("study_rows.csv")).unwrap();
    assert_eq!(a, b, "study rows differ across thread counts");
    let a = std::fs::read(dir1.join("plot_data.csv")).unwrap();
    let b = std::fs::read(dir2.join("plot_data.csv")).unwrap();
    assert_eq!(a, b, "plot data differs across thread counts");
}

#[test]
fn exit_codes_for_config_and_data_errors() {
    // Unknown study kind: config error (2).
    let out = bin().args(["study", "--study", "nope", "--output-dir", "/tmp/gmmil-x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing dataset file: data error (3).
    let out = bin()
        .args([
            "fit",
            "--dataset",
            "/nonexistent/file.csv",
            "--estimator",
            "imle",
            "--output-dir",
            "/tmp/gmmil-x",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // All-negative data cannot support the bag estimator: data error (3).
    let dir = work_dir("exit_neg");
    simulate_into(&dir, &["--sim.alpha=0"]);
    let out = bin()
        .args([
            "fit",
            "--dataset",
            dir.join("dataset.csv").to_str().unwrap(),
            "--estimator",
            "bmle",
            "--output-dir",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
