//! Asymptotic precision matrices and Monte-Carlo diagnostics.
//!
//! The fully labeled estimator has a block-diagonal asymptotic precision
//! assembled here in closed form. The bag-level and subsample-level
//! precisions are obtained by subtracting (and adding back) the
//! efficiency-gap matrices
//! `Delta = E{ w * pitilde (1 - pitilde) delta1 delta1' }`, estimated by
//! Monte Carlo: `w = 1` for the bag gap, `w = gamma_im` for the
//! subsample gap. `delta1` is the derivative of the complete-data score
//! with respect to the latent label, so the gap estimate can be
//! cross-checked against outer-product-of-scores information estimates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bmle::{fit_bmle, EmOptions};
use crate::error::{Error, Result};
use crate::imle::fit_imle;
use crate::linalg::{duplication_matrix, spd_factorize_default, DuplicationMatrix, SpdFactor};
use crate::metrics::PosteriorScorer;
use crate::model::{flatten, param_len, EstimatorKind, ModelParams};
use crate::rng::{child_seed, substream, Stream};
use crate::sim::{effective_truth, simulate, SimConfig};
use crate::smle::fit_smle;
use crate::subsample::{beta_from_params, calibrate_alpha_n, draw_subsample, gamma_probability};

/// Closed-form precision of the fully labeled estimator:
/// `diag{ alpha / (pi (1-pi)), alpha pi Omega, (1 - alpha pi) Omega,
/// D' (Sigma (x) Sigma) D / 2 }`.
pub fn omega_ins(params: &ModelParams) -> Result<DMatrix<f64>> {
    let p = params.p();
    let q = param_len(p);
    let factor = spd_factorize_default(&params.sigma)?;
    let omega = factor.inverse();
    let mut out = DMatrix::zeros(q, q);
    out[(0, 0)] = params.alpha / (params.pi * (1.0 - params.pi));
    let a_pi = params.alpha * params.pi;
    out.view_mut((1, 1), (p, p)).copy_from(&(a_pi * &omega));
    out.view_mut((1 + p, 1 + p), (p, p)).copy_from(&((1.0 - a_pi) * &omega));
    let d = duplication_matrix(p).to_dense();
    let kron = params.sigma.kronecker(&params.sigma);
    let fourth = 0.5 * d.transpose() * kron * d;
    let t = p * (p + 1) / 2;
    out.view_mut((1 + 2 * p, 1 + 2 * p), (t, t)).copy_from(&fourth);
    Ok(out)
}

/// Weight applied inside the gap expectation.
#[derive(Debug, Clone)]
pub enum DeltaWeight {
    /// `pitilde (1 - pitilde)`: gap between fully labeled and bag-level
    /// information.
    BagGap,
    /// Additionally multiplied by the subsampling probability
    /// `gamma_im = logistic(alpha_n + x' beta)`.
    SubGap { alpha_n: f64, beta: DVector<f64> },
}

/// Monte-Carlo estimate of a gap matrix.
#[derive(Debug, Clone)]
pub struct DeltaEstimate {
    pub matrix: DMatrix<f64>,
    /// Largest entrywise standard error of the Monte-Carlo mean.
    pub standard_error: f64,
    pub mc_samples: usize,
}

struct Delta1Builder<'a> {
    params: &'a ModelParams,
    factor: SpdFactor,
    dup: DuplicationMatrix,
    inv_pi1mpi: f64,
}

impl<'a> Delta1Builder<'a> {
    fn new(params: &'a ModelParams) -> Result<Self> {
        let factor = spd_factorize_default(&params.sigma)?;
        Ok(Delta1Builder {
            params,
            factor,
            dup: duplication_matrix(params.p()),
            inv_pi1mpi: 1.0 / (params.pi * (1.0 - params.pi)),
        })
    }

    /// `delta1(x)`: derivative of the complete-data score in the latent
    /// label.
    fn build(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.params.p();
        let d1 = x - &self.params.mu1;
        let d0 = x - &self.params.mu0;
        let od1 = self.factor.solve_vec(&d1);
        let od0 = self.factor.solve_vec(&d0);
        let mut vec_diff = vec![0.0; p * p];
        for j in 0..p {
            for i in 0..p {
                vec_diff[j * p + i] = d1[i] * d1[j] - d0[i] * d0[j];
            }
        }
        let fourth = self.dup.transpose_apply(&vec_diff);
        let q = param_len(p);
        let mut out = DVector::zeros(q);
        out[0] = self.inv_pi1mpi;
        out.rows_mut(1, p).copy_from(&od1);
        out.rows_mut(1 + p, p).copy_from(&(-od0));
        for (k, v) in fourth.iter().enumerate() {
            out[1 + 2 * p + k] = -0.5 * v;
        }
        out
    }
}

/// Monte-Carlo average of the weighted outer products over model draws.
/// Sampling is restricted to positive bags (negative draws contribute
/// zero weight) and rescaled by `alpha`.
pub fn delta_scores(
    params: &ModelParams,
    mc_samples: usize,
    seed: u64,
    weight: &DeltaWeight,
) -> Result<DeltaEstimate> {
    if mc_samples < 1000 {
        return Err(Error::Config("delta estimation needs mc_samples >= 1000".into()));
    }
    let p = params.p();
    let q = param_len(p);
    let builder = Delta1Builder::new(params)?;
    let scorer = PosteriorScorer::new(params)?;
    let lower = builder.factor.lower().clone();

    let chunks = 64usize;
    let per_chunk = mc_samples.div_ceil(chunks);
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, Stream::MonteCarlo, c as u64);
            let mut sum = DMatrix::zeros(q, q);
            let mut sumsq = DMatrix::zeros(q, q);
            let n = per_chunk.min(mc_samples - c * per_chunk);
            for _ in 0..n {
                let a = rng.random::<f64>() < params.pi;
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mu = if a { &params.mu1 } else { &params.mu0 };
                let x = mu + &lower * z;
                let pt = scorer.score(&x);
                let mut w = pt * (1.0 - pt);
                if let DeltaWeight::SubGap { alpha_n, beta } = weight {
                    w *= gamma_probability(&x, *alpha_n, beta);
                }
                if w == 0.0 {
                    continue;
                }
                let delta = builder.build(&x);
                let scaled = params.alpha * w;
                for j in 0..q {
                    for i in 0..q {
                        let v = scaled * delta[i] * delta[j];
                        sum[(i, j)] += v;
                        sumsq[(i, j)] += v * v;
                    }
                }
            }
            (sum, sumsq, n)
        })
        .collect();

    let mut sum = DMatrix::zeros(q, q);
    let mut sumsq = DMatrix::zeros(q, q);
    let mut total = 0usize;
    for (s, s2, n) in partials {
        sum += s;
        sumsq += s2;
        total += n;
    }
    let n = total as f64;
    let mean = sum / n;
    let mut max_se = 0.0f64;
    for j in 0..q {
        for i in 0..q {
            let var = (sumsq[(i, j)] / n - mean[(i, j)] * mean[(i, j)]).max(0.0);
            max_se = max_se.max((var / n).sqrt());
        }
    }
    let mut matrix = mean;
    crate::linalg::symmetrize(&mut matrix);
    Ok(DeltaEstimate { matrix, standard_error: max_se, mc_samples: total })
}

/// All precision matrices for one parameter block.
#[derive(Debug, Clone)]
pub struct PrecisionReport {
    pub omega_ins: DMatrix<f64>,
    pub delta_bag: DMatrix<f64>,
    pub delta_sub: DMatrix<f64>,
    pub omega_bag: DMatrix<f64>,
    pub omega_sub: DMatrix<f64>,
    pub mc_samples: usize,
    pub mc_standard_error: f64,
}

/// Assembles the instance-level precision and the Monte-Carlo bag and
/// subsample precisions. `subsample` carries the design `(alpha_n,
/// beta)`; without it the subsample gap is zero and the subsample
/// precision equals the bag precision.
pub fn precision_report(
    params: &ModelParams,
    mc_samples: usize,
    seed: u64,
    subsample: Option<(f64, DVector<f64>)>,
) -> Result<PrecisionReport> {
    let ins = omega_ins(params)?;
    let bag_gap = delta_scores(params, mc_samples, seed, &DeltaWeight::BagGap)?;
    let (sub_gap_matrix, sub_se) = match subsample {
        Some((alpha_n, beta)) => {
            let est =
                delta_scores(params, mc_samples, seed, &DeltaWeight::SubGap { alpha_n, beta })?;
            (est.matrix, est.standard_error)
        }
        None => (DMatrix::zeros(ins.nrows(), ins.ncols()), 0.0),
    };
    let omega_bag = &ins - &bag_gap.matrix;
    let omega_sub = &omega_bag + &sub_gap_matrix;
    Ok(PrecisionReport {
        omega_ins: ins,
        delta_bag: bag_gap.matrix,
        delta_sub: sub_gap_matrix,
        omega_bag,
        omega_sub,
        mc_samples,
        mc_standard_error: bag_gap.standard_error.max(sub_se),
    })
}

/// Agreement check between the direct gap estimate and the difference of
/// outer-product-of-scores information estimates, on shared draws.
#[derive(Debug, Clone)]
pub struct DeltaCrossCheck {
    pub delta_direct: DMatrix<f64>,
    pub fisher_difference: DMatrix<f64>,
    /// Largest absolute entry of (direct - difference).
    pub max_discrepancy: f64,
    /// Largest entrywise standard error of the discrepancy.
    pub max_standard_error: f64,
    pub mc_samples: usize,
}

/// Estimates `Omega_ins` and `Omega_bag` by averaging score outer
/// products over full `(Y, A, X)` draws and compares their difference
/// with the direct weighted-outer-product gap on the same draws. The
/// discrepancy has conditional mean zero draw by draw, so disagreement
/// beyond a few standard errors would indicate a mis-derived `delta1`.
pub fn delta_cross_check(
    params: &ModelParams,
    mc_samples: usize,
    seed: u64,
) -> Result<DeltaCrossCheck> {
    if mc_samples < 1000 {
        return Err(Error::Config("cross-check needs mc_samples >= 1000".into()));
    }
    let p = params.p();
    let q = param_len(p);
    let builder = Delta1Builder::new(params)?;
    let scorer = PosteriorScorer::new(params)?;
    let factor = spd_factorize_default(&params.sigma)?;
    let lower = factor.lower().clone();
    let dup = duplication_matrix(p);
    let inv_pi = 1.0 / (params.pi * (1.0 - params.pi));

    // vech-block score: (D' vec(Sigma - S)) / 2 where S mixes the two
    // centered outer products with the given weight on class 1.
    let vech_score = |d1: &DVector<f64>, d0: &DVector<f64>, w1: f64| -> Vec<f64> {
        let mut v = vec![0.0; p * p];
        for j in 0..p {
            for i in 0..p {
                let s = w1 * d1[i] * d1[j] + (1.0 - w1) * d0[i] * d0[j];
                v[j * p + i] = params.sigma[(i, j)] - s;
            }
        }
        dup.transpose_apply(&v).iter().map(|x| 0.5 * x).collect()
    };

    let mut rng = substream(seed, Stream::MonteCarlo, 1_000_000);
    let mut sum_direct: DMatrix<f64> = DMatrix::zeros(q, q);
    let mut sum_diff: DMatrix<f64> = DMatrix::zeros(q, q);
    let mut sumsq_disc: DMatrix<f64> = DMatrix::zeros(q, q);
    let mut sum_disc: DMatrix<f64> = DMatrix::zeros(q, q);
    for _ in 0..mc_samples {
        let y = rng.random::<f64>() < params.alpha;
        let mut s_c = DVector::zeros(q);
        let mut s_b = DVector::zeros(q);
        let mut direct = DMatrix::zeros(q, q);
        let (a, x) = if y {
            let a = rng.random::<f64>() < params.pi;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mu = if a { &params.mu1 } else { &params.mu0 };
            (a, mu + &lower * z)
        } else {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            (false, &params.mu0 + &lower * z)
        };
        let d1 = &x - &params.mu1;
        let d0 = &x - &params.mu0;
        let od1 = factor.solve_vec(&d1);
        let od0 = factor.solve_vec(&d0);
        if y {
            let af = if a { 1.0 } else { 0.0 };
            s_c[0] = (af - params.pi) * inv_pi;
            s_c.rows_mut(1, p).copy_from(&(af * &od1));
            s_c.rows_mut(1 + p, p).copy_from(&((1.0 - af) * &od0));
            for (k, v) in vech_score(&d1, &d0, af).iter().enumerate() {
                s_c[1 + 2 * p + k] = *v;
            }
            let pt = scorer.score(&x);
            s_b[0] = (pt - params.pi) * inv_pi;
            s_b.rows_mut(1, p).copy_from(&(pt * &od1));
            s_b.rows_mut(1 + p, p).copy_from(&((1.0 - pt) * &od0));
            for (k, v) in vech_score(&d1, &d0, pt).iter().enumerate() {
                s_b[1 + 2 * p + k] = *v;
            }
            let delta = builder.build(&x);
            let w = pt * (1.0 - pt);
            direct.ger(w, &delta, &delta, 1.0);
        } else {
            // Negative bags: identical complete and observed scores.
            s_c.rows_mut(1 + p, p).copy_from(&od0);
            for (k, v) in vech_score(&d1, &d0, 0.0).iter().enumerate() {
                s_c[1 + 2 * p + k] = *v;
            }
            s_b.copy_from(&s_c);
        }
        sum_direct += &direct;
        let mut diff = DMatrix::zeros(q, q);
        diff.ger(1.0, &s_c, &s_c, 1.0);
        diff.ger(-1.0, &s_b, &s_b, 1.0);
        sum_diff += &diff;
        let disc = &diff - &direct;
        for j in 0..q {
            for i in 0..q {
                sum_disc[(i, j)] += disc[(i, j)];
                sumsq_disc[(i, j)] += disc[(i, j)] * disc[(i, j)];
            }
        }
    }
    let n = mc_samples as f64;
    let delta_direct = sum_direct / n;
    let fisher_difference = sum_diff / n;
    let mut max_disc = 0.0f64;
    let mut max_se = 0.0f64;
    for j in 0..q {
        for i in 0..q {
            let mean: f64 = sum_disc[(i, j)] / n;
            let var = (sumsq_disc[(i, j)] / n - mean * mean).max(0.0);
            max_disc = max_disc.max(mean.abs());
            max_se = max_se.max((var / n).sqrt());
        }
    }
    Ok(DeltaCrossCheck {
        delta_direct,
        fisher_difference,
        max_discrepancy: max_disc,
        max_standard_error: max_se,
        mc_samples,
    })
}

/// Summary of a studentized sampling-distribution experiment.
#[derive(Debug, Clone)]
pub struct StudentizedSummary {
    pub estimator: EstimatorKind,
    pub replications_ok: usize,
    pub failures: usize,
    /// Scaling `sqrt(NM)` used on the errors.
    pub scale: f64,
    pub coord_mean: Vec<f64>,
    pub coord_var: Vec<f64>,
    /// Jarque-Bera statistic per coordinate (reported, not asserted).
    pub jarque_bera: Vec<f64>,
    /// Empirical correlation matrix of the studentized coordinates.
    pub correlation: DMatrix<f64>,
    /// Block name per coordinate.
    pub blocks: Vec<&'static str>,
}

impl StudentizedSummary {
    /// Largest |correlation| between coordinates of different blocks.
    pub fn max_cross_block_corr(&self) -> f64 {
        let q = self.blocks.len();
        let mut worst = 0.0f64;
        for j in 0..q {
            for i in (j + 1)..q {
                if self.blocks[i] != self.blocks[j] {
                    worst = worst.max(self.correlation[(i, j)].abs());
                }
            }
        }
        worst
    }
}

fn block_labels(p: usize) -> Vec<&'static str> {
    let mut blocks = vec!["pi"];
    blocks.extend(std::iter::repeat_n("mu1", p));
    blocks.extend(std::iter::repeat_n("mu0", p));
    blocks.extend(std::iter::repeat_n("omega", p * (p + 1) / 2));
    blocks
}

/// Runs replications of simulate-and-fit, studentizes
/// `sqrt(NM) (theta_hat - theta)` with the estimator's asymptotic
/// precision at the truth, and summarizes the empirical distribution.
/// `smle_fraction` sets the subsample target when checking the SMLE.
pub fn sampling_distribution_check(
    estimator: EstimatorKind,
    sim_config: &SimConfig,
    replications: usize,
    seed: u64,
    em: &EmOptions,
    smle_fraction: f64,
    delta_mc: usize,
) -> Result<StudentizedSummary> {
    if replications < 100 {
        return Err(Error::Config("sampling check needs at least 100 replications".into()));
    }
    let truth = effective_truth(sim_config)?;
    let theta_true = flatten(&truth)?;
    let q = theta_true.len();
    let p = truth.p();

    // Studentizer at the truth.
    let precision = match estimator {
        EstimatorKind::Imle => omega_ins(&truth)?,
        EstimatorKind::Bmle => {
            let gap = delta_scores(&truth, delta_mc, child_seed(seed, Stream::MonteCarlo, 1), &DeltaWeight::BagGap)?;
            omega_ins(&truth)? - gap.matrix
        }
        EstimatorKind::Smle => {
            let beta = beta_from_params(&truth)?;
            let mut cal_cfg = sim_config.clone();
            cal_cfg.seed = child_seed(seed, Stream::MonteCarlo, 2);
            let reference = simulate(&cal_cfg)?;
            let alpha_n = calibrate_alpha_n(&beta, &reference, smle_fraction)?;
            let bag_gap = delta_scores(&truth, delta_mc, child_seed(seed, Stream::MonteCarlo, 1), &DeltaWeight::BagGap)?;
            let sub_gap = delta_scores(
                &truth,
                delta_mc,
                child_seed(seed, Stream::MonteCarlo, 3),
                &DeltaWeight::SubGap { alpha_n, beta },
            )?;
            omega_ins(&truth)? - bag_gap.matrix + sub_gap.matrix
        }
    };
    let chol = spd_factorize_default(&precision)?;
    let lt = chol.lower().transpose();
    let scale = ((sim_config.n_bags * sim_config.bag_size) as f64).sqrt();

    let results: Vec<Result<DVector<f64>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut cfg = sim_config.clone();
            cfg.seed = child_seed(seed, Stream::Replication, r as u64);
            let ds = simulate(&cfg)?;
            let fit = match estimator {
                EstimatorKind::Imle => fit_imle(&ds)?,
                EstimatorKind::Bmle => fit_bmle(&ds, em)?,
                EstimatorKind::Smle => {
                    let bmle = fit_bmle(&ds, em)?;
                    let beta = crate::subsample::beta_from_fit(&bmle)?;
                    let alpha_n = calibrate_alpha_n(&beta, &ds, smle_fraction)?;
                    let plan = draw_subsample(
                        &ds,
                        alpha_n,
                        &beta,
                        child_seed(cfg.seed, Stream::Subsample, 0),
                    )?;
                    fit_smle(&plan.apply(&ds)?, em)?
                }
            };
            let err = flatten(&fit.params)? - &theta_true;
            Ok(&lt * err * scale)
        })
        .collect();

    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(replications);
    let mut failures = 0usize;
    for r in results {
        match r {
            Ok(v) => draws.push(v),
            Err(_) => failures += 1,
        }
    }
    let n = draws.len();
    if n < 2 {
        return Err(Error::InitFailure("all replications failed".into()));
    }
    let nf = n as f64;
    let mut coord_mean = vec![0.0; q];
    for d in &draws {
        for j in 0..q {
            coord_mean[j] += d[j] / nf;
        }
    }
    let mut coord_var = vec![0.0; q];
    let mut m3 = vec![0.0; q];
    let mut m4 = vec![0.0; q];
    for d in &draws {
        for j in 0..q {
            let c = d[j] - coord_mean[j];
            coord_var[j] += c * c / (nf - 1.0);
            m3[j] += c.powi(3) / nf;
            m4[j] += c.powi(4) / nf;
        }
    }
    let jarque_bera: Vec<f64> = (0..q)
        .map(|j| {
            let s2 = coord_var[j] * (nf - 1.0) / nf;
            let skew = m3[j] / s2.powf(1.5);
            let kurt = m4[j] / (s2 * s2);
            nf / 6.0 * (skew * skew + (kurt - 3.0) * (kurt - 3.0) / 4.0)
        })
        .collect();
    let mut correlation = DMatrix::identity(q, q);
    for j in 0..q {
        for i in (j + 1)..q {
            let mut cov = 0.0;
            for d in &draws {
                cov += (d[i] - coord_mean[i]) * (d[j] - coord_mean[j]);
            }
            cov /= nf - 1.0;
            let rho = cov / (coord_var[i] * coord_var[j]).sqrt();
            correlation[(i, j)] = rho;
            correlation[(j, i)] = rho;
        }
    }

    Ok(StudentizedSummary {
        estimator,
        replications_ok: n,
        failures,
        scale,
        coord_mean,
        coord_var,
        jarque_bera,
        correlation,
        blocks: block_labels(p),
    })
}
