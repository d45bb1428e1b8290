//! Instance posteriors, bag scores, and evaluation metrics.
//!
//! The instance posterior has a logistic closed form,
//! `logistic(a0 + x' beta)` with `beta = Omega (mu1 - mu0)`, which is
//! what prediction uses; tests hold it against the mixture-ratio form.
//! The bag-level positive probability is the complement of the product
//! of instance complements, evaluated through the log domain so bags
//! with thousands of instances cannot underflow.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{log1m_prod_complement, logistic, spd_factorize_default};
use crate::model::{flatten, BagDataset, ModelParams};
use crate::subsample::beta_from_params;

/// Precomputed coefficients of the posterior's logistic form.
#[derive(Debug, Clone)]
pub struct PosteriorScorer {
    alpha0: f64,
    beta: DVector<f64>,
}

impl PosteriorScorer {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let factor = spd_factorize_default(&params.sigma)?;
        let beta = beta_from_params(params)?;
        let p = params.p();
        let mut buf = vec![0.0; p];
        let zero = vec![0.0; p];
        let q0 = factor.mahalanobis_sq(params.mu0.as_slice(), &zero, &mut buf);
        let q1 = factor.mahalanobis_sq(params.mu1.as_slice(), &zero, &mut buf);
        let alpha0 = 0.5 * (q0 - q1) + (params.pi / (1.0 - params.pi)).ln();
        Ok(PosteriorScorer { alpha0, beta })
    }

    pub fn score(&self, x: &DVector<f64>) -> f64 {
        logistic(self.alpha0 + x.dot(&self.beta))
    }

    pub fn score_slice(&self, x: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum();
        logistic(self.alpha0 + dot)
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }
}

/// Posterior positive probability of one instance inside a positive bag.
pub fn instance_posterior(params: &ModelParams, x: &DVector<f64>) -> Result<f64> {
    if x.len() != params.p() {
        return Err(Error::DimensionMismatch { expected: params.p(), got: x.len() });
    }
    Ok(PosteriorScorer::new(params)?.score(x))
}

/// Bag-level positive probability `1 - prod_m (1 - pi_m)`.
pub fn bag_positive_prob(posteriors: &[f64]) -> f64 {
    let logs: Vec<f64> = posteriors
        .iter()
        .map(|&p| {
            let p = p.clamp(0.0, 1.0);
            f64::ln_1p(-p)
        })
        .collect();
    log1m_prod_complement(&logs).exp()
}

/// Threshold-based and ranking metrics for one score/label vector.
#[derive(Debug, Clone, Default)]
pub struct BinaryMetrics {
    /// Midrank AUC; absent when only one class is present.
    pub auc: Option<f64>,
    /// Step-integrated area under the precision-recall curve; absent
    /// when only one class is present.
    pub auprc: Option<f64>,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub single_class: bool,
    /// Set when a zero denominator forced f1/recall/precision to 0.
    pub degenerate_denominator: bool,
}

/// Metrics at a decision threshold (scores `>= threshold` are called
/// positive). AUC averages tied ranks; AUPRC integrates precision over
/// recall increments with no interpolation.
pub fn binary_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<BinaryMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut out = BinaryMetrics { single_class: n_pos == 0 || n_neg == 0, ..Default::default() };

    // Threshold metrics.
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let pred_pos = tp + fp;
    if pred_pos == 0 {
        out.degenerate_denominator = true;
    } else {
        out.precision = tp as f64 / pred_pos as f64;
    }
    if n_pos == 0 {
        out.degenerate_denominator = true;
    } else {
        out.recall = tp as f64 / n_pos as f64;
    }
    if out.precision + out.recall == 0.0 {
        out.degenerate_denominator = true;
    } else {
        out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
    }

    if out.single_class {
        return Ok(out);
    }

    // Midrank AUC: ranks over ascending scores with ties averaged.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    out.auc = Some(u / (n_pos as f64 * n_neg as f64));

    // AUPRC: walk distinct score groups from the top.
    let mut desc = order;
    desc.reverse();
    let mut tp_cum = 0usize;
    let mut fp_cum = 0usize;
    let mut prev_recall = 0.0f64;
    let mut auprc = 0.0f64;
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j + 1 < desc.len() && scores[desc[j + 1]] == scores[desc[i]] {
            j += 1;
        }
        for &k in &desc[i..=j] {
            if labels[k] {
                tp_cum += 1;
            } else {
                fp_cum += 1;
            }
        }
        let recall = tp_cum as f64 / n_pos as f64;
        let precision = tp_cum as f64 / (tp_cum + fp_cum) as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    out.auprc = Some(auprc);
    Ok(out)
}

/// Averaged instance-level metrics across positive bags.
#[derive(Debug, Clone)]
pub struct InstanceLevelReport {
    pub auc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    /// Positive bags whose ranking metrics were undefined (single class)
    /// and therefore skipped for the AUC/AUPRC averages.
    pub skipped_single_class: usize,
    pub bags_used: usize,
    /// True when instances were pooled across bags instead of averaged
    /// per bag.
    pub pooled: bool,
}

/// Scores every positive bag's instances against the ground-truth
/// labels and averages the per-bag metrics. Negative bags carry no
/// information at the instance level and are excluded. `pooled` scores
/// all positive-bag instances as one vector instead.
pub fn instance_level_report(
    params: &ModelParams,
    dataset: &BagDataset,
    threshold: f64,
    pooled: bool,
) -> Result<InstanceLevelReport> {
    if dataset.n_positive_bags() == 0 {
        return Err(Error::NoPositiveBags);
    }
    let scorer = PosteriorScorer::new(params)?;
    let mut bag_scores: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    for bag in dataset.bags.iter().filter(|b| b.y) {
        let mut scores = Vec::with_capacity(bag.instances.len());
        let mut labels = Vec::with_capacity(bag.instances.len());
        for inst in &bag.instances {
            let a = inst.a.as_f64().ok_or_else(|| Error::UnlabeledInstance {
                bag_id: bag.bag_id.clone(),
                instance_id: inst.instance_id.clone(),
            })?;
            scores.push(scorer.score(&inst.x));
            labels.push(a > 0.0);
        }
        bag_scores.push((scores, labels));
    }

    if pooled {
        let scores: Vec<f64> = bag_scores.iter().flat_map(|(s, _)| s.iter().copied()).collect();
        let labels: Vec<bool> = bag_scores.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        let m = binary_metrics(&scores, &labels, threshold)?;
        return Ok(InstanceLevelReport {
            auc: m.auc,
            auprc: m.auprc,
            f1: m.f1,
            recall: m.recall,
            precision: m.precision,
            skipped_single_class: usize::from(m.single_class),
            bags_used: bag_scores.len(),
            pooled: true,
        });
    }

    let mut rank_sums = (0.0f64, 0.0f64, 0usize); // auc, auprc, count
    let mut thr_sums = (0.0f64, 0.0f64, 0.0f64); // f1, recall, precision
    let mut skipped = 0usize;
    for (scores, labels) in &bag_scores {
        let m = binary_metrics(scores, labels, threshold)?;
        thr_sums.0 += m.f1;
        thr_sums.1 += m.recall;
        thr_sums.2 += m.precision;
        match (m.auc, m.auprc) {
            (Some(a), Some(p)) => {
                rank_sums.0 += a;
                rank_sums.1 += p;
                rank_sums.2 += 1;
            }
            _ => skipped += 1,
        }
    }
    let n_bags = bag_scores.len() as f64;
    Ok(InstanceLevelReport {
        auc: (rank_sums.2 > 0).then(|| rank_sums.0 / rank_sums.2 as f64),
        auprc: (rank_sums.2 > 0).then(|| rank_sums.1 / rank_sums.2 as f64),
        f1: thr_sums.0 / n_bags,
        recall: thr_sums.1 / n_bags,
        precision: thr_sums.2 / n_bags,
        skipped_single_class: skipped,
        bags_used: bag_scores.len(),
        pooled: false,
    })
}

/// One value per parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockValues {
    pub pi: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub omega: f64,
}

impl BlockValues {
    pub fn get(&self, block: &str) -> Option<f64> {
        match block {
            "pi" => Some(self.pi),
            "mu1" => Some(self.mu1),
            "mu0" => Some(self.mu0),
            "omega" => Some(self.omega),
            _ => None,
        }
    }
}

pub const BLOCK_NAMES: [&str; 4] = ["pi", "mu1", "mu0", "omega"];

/// Floor applied to `ln(0)` so exact fits stay finite in reports.
pub const LOG_MSE_FLOOR: f64 = -745.0;

fn guarded_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln().max(LOG_MSE_FLOOR)
    } else {
        LOG_MSE_FLOOR
    }
}

/// Dimension-normalized squared errors per block for one estimate.
pub fn block_squared_errors(estimate: &ModelParams, truth: &ModelParams) -> Result<BlockValues> {
    if estimate.p() != truth.p() {
        return Err(Error::DimensionMismatch { expected: truth.p(), got: estimate.p() });
    }
    let p = truth.p();
    let e = flatten(estimate)?;
    let t = flatten(truth)?;
    let d = &e - &t;
    let pi = d[0] * d[0];
    let mu1 = d.rows(1, p).norm_squared() / p as f64;
    let mu0 = d.rows(1 + p, p).norm_squared() / p as f64;
    let vech_len = p * (p + 1) / 2;
    let omega = d.rows(1 + 2 * p, vech_len).norm_squared() / vech_len as f64;
    Ok(BlockValues { pi, mu1, mu0, omega })
}

#[derive(Debug, Clone)]
pub struct MseReport {
    pub mse: BlockValues,
    pub log_mse: BlockValues,
    pub replications: usize,
}

/// Mean squared error per block over replications, each block
/// normalized by its dimension, plus natural-log transforms.
pub fn mse_report(estimates: &[ModelParams], truth: &ModelParams) -> Result<MseReport> {
    if estimates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = BlockValues { pi: 0.0, mu1: 0.0, mu0: 0.0, omega: 0.0 };
    for est in estimates {
        let e = block_squared_errors(est, truth)?;
        acc.pi += e.pi;
        acc.mu1 += e.mu1;
        acc.mu0 += e.mu0;
        acc.omega += e.omega;
    }
    let r = estimates.len() as f64;
    let mse = BlockValues { pi: acc.pi / r, mu1: acc.mu1 / r, mu0: acc.mu0 / r, omega: acc.omega / r };
    let log_mse = BlockValues {
        pi: guarded_ln(mse.pi),
        mu1: guarded_ln(mse.mu1),
        mu0: guarded_ln(mse.mu0),
        omega: guarded_ln(mse.omega),
    };
    Ok(MseReport { mse, log_mse, replications: estimates.len() })
}
