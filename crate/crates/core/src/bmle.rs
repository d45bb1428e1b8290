//! Bag-based maximum likelihood estimation via EM.
//!
//! Only bag labels are consulted: instances in negative bags are known
//! negatives, instances in positive bags follow the two-component
//! mixture. The E-step computes mixture responsibilities for
//! positive-bag instances (zero elsewhere); the M-step updates `pi`, the
//! class means, and the pooled responsibility-weighted scatter.
//!
//! The same engine drives the subsample-based estimator: when asked to
//! respect subsample indicators it clamps the responsibility of a
//! revealed instance to its label, which turns that instance's term into
//! a complete-data term. With no indicator set the two estimators execute
//! the same arithmetic, which keeps them bit-identical in the zero-
//! fraction limit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    log_gaussian_density_buf, log_sum_exp2, logistic, pairwise_reduce, spd_factorize_default,
    symmetrize, SpdFactor,
};
use crate::model::{
    estimate_alpha, BagDataset, EstimatorKind, FitResult, ModelParams,
};
use crate::rng::{substream, Stream};

/// EM controls. Convergence is declared on the relative change of the
/// objective, `|l_t - l_{t-1}| / (1 + |l_t|)`, which is scale-free in
/// the feature dimension.
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// `pi` is clamped into `[pi_clip, 1 - pi_clip]` after every M-step.
    pub pi_clip: f64,
    pub init: InitStrategy,
}

#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Negative-bag mean for `mu0`, mean of the most outlying
    /// positive-bag instances for `mu1`, pooled covariance, `pi = 0.1`.
    MomentInit,
    Provided(ModelParams),
    /// Perturbed moment starts; the best final objective wins.
    RandomRestart { restarts: usize, seed: u64 },
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iters: 500, rel_tol: 1e-8, pi_clip: 1e-6, init: InitStrategy::MomentInit }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("em.max_iters must be >= 1".into()));
        }
        if self.rel_tol <= 0.0 || self.rel_tol.is_nan() {
            return Err(Error::Config("em.rel_tol must be positive".into()));
        }
        if !(self.pi_clip > 0.0 && self.pi_clip < 0.5) {
            return Err(Error::Config("em.pi_clip must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Per-bag output of one E-step sweep.
struct BagPass {
    loglik: f64,
    sum_w: f64,
    sum_wx: DVector<f64>,
    sum_x: DVector<f64>,
    n_inst: f64,
    n_pos_bag_inst: f64,
    /// Responsibilities, one per instance (zero in negative bags).
    w: Vec<f64>,
}

fn pass_bag(
    bag: &crate::model::Bag,
    params: &ModelParams,
    factor: &SpdFactor,
    respect_subsample: bool,
) -> Result<BagPass> {
    let p = params.p();
    let log_pi = params.pi.ln();
    let log_1mpi = (1.0 - params.pi).ln();
    let mut buf = vec![0.0; p];
    let mut out = BagPass {
        loglik: 0.0,
        sum_w: 0.0,
        sum_wx: DVector::zeros(p),
        sum_x: DVector::zeros(p),
        n_inst: bag.instances.len() as f64,
        n_pos_bag_inst: if bag.y { bag.instances.len() as f64 } else { 0.0 },
        w: vec![0.0; bag.instances.len()],
    };
    let mu0 = params.mu0.as_slice();
    let mu1 = params.mu1.as_slice();
    for (j, inst) in bag.instances.iter().enumerate() {
        let x = inst.x.as_slice();
        let lphi0 = log_gaussian_density_buf(x, mu0, factor, &mut buf);
        if bag.y {
            let lphi1 = log_gaussian_density_buf(x, mu1, factor, &mut buf);
            let l1 = log_pi + lphi1;
            let l0 = log_1mpi + lphi0;
            if respect_subsample && inst.s {
                let a = inst.a.as_f64().ok_or_else(|| {
                    Error::InconsistentSubsample(format!(
                        "bag {} instance {} has s=1 but no revealed label",
                        bag.bag_id, inst.instance_id
                    ))
                })?;
                // Complete-data term: mixture plus revealed-label factor.
                out.loglik += a * l1 + (1.0 - a) * l0;
                out.w[j] = a;
            } else {
                out.loglik += log_sum_exp2(l1, l0);
                out.w[j] = logistic(l1 - l0);
            }
            out.sum_w += out.w[j];
            if out.w[j] > 0.0 {
                out.sum_wx.axpy(out.w[j], &inst.x, 1.0);
            }
        } else {
            out.loglik += lphi0;
        }
        out.sum_x += &inst.x;
    }
    Ok(out)
}

struct Totals {
    loglik: f64,
    sum_w: f64,
    sum_wx: DVector<f64>,
    sum_x: DVector<f64>,
    n_inst: f64,
    n_pos_bag_inst: f64,
}

fn combine_totals(mut a: Totals, b: &BagPass) -> Totals {
    a.loglik += b.loglik;
    a.sum_w += b.sum_w;
    a.sum_wx += &b.sum_wx;
    a.sum_x += &b.sum_x;
    a.n_inst += b.n_inst;
    a.n_pos_bag_inst += b.n_pos_bag_inst;
    a
}

/// One fused EM sweep: the objective at `params` plus the next iterate.
fn em_pass(
    dataset: &BagDataset,
    params: &ModelParams,
    options: &EmOptions,
    respect_subsample: bool,
) -> Result<(f64, ModelParams, bool)> {
    let factor = spd_factorize_default(&params.sigma)?;
    let ridged = factor.ridge_added() > 0.0;
    let p = dataset.p;

    let passes: Vec<BagPass> = dataset
        .bags
        .par_iter()
        .map(|bag| pass_bag(bag, params, &factor, respect_subsample))
        .collect::<Result<Vec<_>>>()?;

    // Fixed-shape tree over per-bag partials keeps sums deterministic.
    let init = || Totals {
        loglik: 0.0,
        sum_w: 0.0,
        sum_wx: DVector::zeros(p),
        sum_x: DVector::zeros(p),
        n_inst: 0.0,
        n_pos_bag_inst: 0.0,
    };
    let totals = pairwise_reduce(
        passes.len(),
        &|i| combine_totals(init(), &passes[i]),
        &|a, b| Totals {
            loglik: a.loglik + b.loglik,
            sum_w: a.sum_w + b.sum_w,
            sum_wx: a.sum_wx + b.sum_wx,
            sum_x: a.sum_x + b.sum_x,
            n_inst: a.n_inst + b.n_inst,
            n_pos_bag_inst: a.n_pos_bag_inst + b.n_pos_bag_inst,
        },
    )
    .ok_or(Error::EmptyDataset)?;

    if totals.sum_w < 1e-10 {
        return Err(Error::DegenerateResponsibilities { total: totals.sum_w });
    }
    let neg_weight = totals.n_inst - totals.sum_w;
    if neg_weight < 1e-10 {
        return Err(Error::DegenerateResponsibilities { total: neg_weight });
    }

    let pi = (totals.sum_w / totals.n_pos_bag_inst).clamp(options.pi_clip, 1.0 - options.pi_clip);
    let mu1 = &totals.sum_wx / totals.sum_w;
    let mu0 = (&totals.sum_x - &totals.sum_wx) / neg_weight;

    // Scatter around the refreshed means, reusing stored responsibilities.
    let scatter_leaf = |i: usize| -> DMatrix<f64> {
        let bag = &dataset.bags[i];
        let pass = &passes[i];
        let mut s = DMatrix::zeros(p, p);
        for (j, inst) in bag.instances.iter().enumerate() {
            let w = pass.w[j];
            if w > 0.0 {
                let d1 = &inst.x - &mu1;
                s.ger(w, &d1, &d1, 1.0);
            }
            if w < 1.0 {
                let d0 = &inst.x - &mu0;
                s.ger(1.0 - w, &d0, &d0, 1.0);
            }
        }
        s
    };
    let scatter =
        pairwise_reduce(dataset.bags.len(), &scatter_leaf, &|a, b| a + b).ok_or(Error::EmptyDataset)?;
    let mut sigma = scatter / totals.n_inst;
    symmetrize(&mut sigma);

    let next = ModelParams { pi, mu1, mu0, sigma, alpha: params.alpha };
    Ok((totals.loglik, next, ridged))
}

/// Objective only (no update): the bag likelihood, or the subsample
/// likelihood when indicators are respected.
fn loglik_pass(dataset: &BagDataset, params: &ModelParams, respect_subsample: bool) -> Result<f64> {
    let factor = spd_factorize_default(&params.sigma)?;
    let passes: Vec<f64> = dataset
        .bags
        .par_iter()
        .map(|bag| pass_bag(bag, params, &factor, respect_subsample).map(|p| p.loglik))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_reduce(passes.len(), &|i| passes[i], &|a, b| a + b).unwrap_or(0.0))
}

/// Bag-level log-likelihood: negative bags contribute `log phi0`,
/// positive bags the log mixture, evaluated by log-sum-exp.
pub fn bag_loglik(params: &ModelParams, dataset: &BagDataset) -> Result<f64> {
    if params.p() != dataset.p {
        return Err(Error::DimensionMismatch { expected: dataset.p, got: params.p() });
    }
    loglik_pass(dataset, params, false)
}

/// Subsample objective for the SMLE; shares every instruction with
/// [`bag_loglik`] when no indicator is set.
pub(crate) fn loglik_with_subsample(params: &ModelParams, dataset: &BagDataset) -> Result<f64> {
    loglik_pass(dataset, params, true)
}

/// E-step responsibilities per bag and instance (zero in negative bags;
/// clamped to the revealed label when indicators are respected).
pub fn responsibilities(
    params: &ModelParams,
    dataset: &BagDataset,
    respect_subsample: bool,
) -> Result<Vec<Vec<f64>>> {
    let factor = spd_factorize_default(&params.sigma)?;
    dataset
        .bags
        .iter()
        .map(|bag| pass_bag(bag, params, &factor, respect_subsample).map(|p| p.w))
        .collect()
}

/// One EM update (E-step responsibilities, M-step re-estimation).
pub fn em_step(params: &ModelParams, dataset: &BagDataset) -> Result<ModelParams> {
    em_step_with(params, dataset, &EmOptions::default(), false)
}

pub(crate) fn em_step_with(
    params: &ModelParams,
    dataset: &BagDataset,
    options: &EmOptions,
    respect_subsample: bool,
) -> Result<ModelParams> {
    em_pass(dataset, params, options, respect_subsample).map(|(_, next, _)| next)
}

/// Moment-based starting point. Exploits the structural zero of the
/// model: negative bags are pure, so their mean pins `mu0`, and the
/// positive-bag instances most distant from it (in pooled Mahalanobis
/// metric) seed `mu1`.
pub fn moment_init(dataset: &BagDataset) -> Result<ModelParams> {
    let p = dataset.p;
    let n_total = dataset.n_instances();
    if n_total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sum_all = DVector::zeros(p);
    let mut sum_neg = DVector::zeros(p);
    let mut n_neg = 0usize;
    for bag in &dataset.bags {
        for inst in &bag.instances {
            sum_all += &inst.x;
            if !bag.y {
                sum_neg += &inst.x;
                n_neg += 1;
            }
        }
    }
    let grand_mean = &sum_all / n_total as f64;
    let mu0 = if n_neg > 0 { sum_neg / n_neg as f64 } else { grand_mean.clone() };

    let mut pooled = DMatrix::zeros(p, p);
    for bag in &dataset.bags {
        for inst in &bag.instances {
            let d = &inst.x - &grand_mean;
            pooled.ger(1.0, &d, &d, 1.0);
        }
    }
    pooled /= n_total as f64;
    symmetrize(&mut pooled);
    let factor = spd_factorize_default(&pooled)
        .map_err(|e| Error::InitFailure(format!("pooled covariance: {e}")))?;

    let mut ranked: Vec<(f64, &DVector<f64>)> = Vec::new();
    let mut buf = vec![0.0; p];
    for bag in dataset.bags.iter().filter(|b| b.y) {
        for inst in &bag.instances {
            let d2 = factor.mahalanobis_sq(inst.x.as_slice(), mu0.as_slice(), &mut buf);
            ranked.push((d2, &inst.x));
        }
    }
    if ranked.is_empty() {
        return Err(Error::NoPositiveBags);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pi0 = 0.1;
    let take = ((pi0 * ranked.len() as f64).ceil() as usize).max(1);
    let mut mu1 = DVector::zeros(p);
    for (_, x) in ranked.iter().take(take) {
        mu1 += *x;
    }
    mu1 /= take as f64;

    Ok(ModelParams { pi: pi0, mu1, mu0, sigma: pooled, alpha: estimate_alpha(dataset)? })
}

fn initial_params(
    dataset: &BagDataset,
    options: &EmOptions,
) -> Result<Vec<ModelParams>> {
    match &options.init {
        InitStrategy::MomentInit => Ok(vec![moment_init(dataset)?]),
        InitStrategy::Provided(params) => {
            if params.p() != dataset.p {
                return Err(Error::InitFailure(format!(
                    "provided parameters have dimension {}, dataset has {}",
                    params.p(),
                    dataset.p
                )));
            }
            Ok(vec![params.clone()])
        }
        InitStrategy::RandomRestart { restarts, seed } => {
            if *restarts == 0 {
                return Err(Error::InitFailure("random restart count must be >= 1".into()));
            }
            // Candidate 0 is the unperturbed moment start; the rest
            // jitter mu1 and pi on their own substreams.
            let base = moment_init(dataset)?;
            let sd: Vec<f64> = (0..dataset.p).map(|j| base.sigma[(j, j)].sqrt()).collect();
            let mut inits = Vec::with_capacity(*restarts);
            inits.push(base.clone());
            for k in 1..*restarts {
                let mut rng = substream(*seed, Stream::Restart, k as u64);
                let mut cand = base.clone();
                for (j, s) in sd.iter().enumerate() {
                    cand.mu1[j] += s * (rng.random::<f64>() - 0.5);
                }
                cand.pi = 0.02 + 0.48 * rng.random::<f64>();
                inits.push(cand);
            }
            Ok(inits)
        }
    }
}

pub(crate) fn run_em(
    dataset: &BagDataset,
    options: &EmOptions,
    respect_subsample: bool,
    kind: EstimatorKind,
) -> Result<FitResult> {
    options.validate()?;
    if dataset.bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.n_positive_bags() == 0 {
        return Err(Error::NoPositiveBags);
    }

    let inits = initial_params(dataset, options)?;
    let mut best: Option<FitResult> = None;
    for init in inits {
        let fit = run_single(dataset, init, options, respect_subsample, kind)?;
        let better = match &best {
            None => true,
            Some(b) => {
                fit.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
                    > b.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
            }
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one initialization"))
}

fn run_single(
    dataset: &BagDataset,
    init: ModelParams,
    options: &EmOptions,
    respect_subsample: bool,
    kind: EstimatorKind,
) -> Result<FitResult> {
    let mut params = init;
    params.alpha = estimate_alpha(dataset)?;
    let mut trace = Vec::new();
    let mut ridge_events = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut prev: Option<f64> = None;

    for _ in 0..options.max_iters {
        let (ll, next, ridged) = em_pass(dataset, &params, options, respect_subsample)?;
        ridge_events += usize::from(ridged);
        trace.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() / (1.0 + ll.abs()) < options.rel_tol {
                converged = true;
                break;
            }
        }
        prev = Some(ll);
        params = next;
        iterations += 1;
    }
    if !converged {
        // Objective of the final iterate, so the trace ends at the
        // returned parameters.
        trace.push(loglik_pass(dataset, &params, respect_subsample)?);
    }

    Ok(FitResult { params, estimator_kind: kind, loglik_trace: trace, iterations, converged, ridge_events })
}

/// EM fit from bag labels only. Instance labels are ignored even when
/// present.
pub fn fit_bmle(dataset: &BagDataset, options: &EmOptions) -> Result<FitResult> {
    run_em(dataset, options, false, EstimatorKind::Bmle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Bag, Instance, InstanceLabel};
    use crate::sim::{simulate, SimConfig};
    use approx::assert_relative_eq;

    fn inst(id: &str, x: Vec<f64>) -> Instance {
        Instance::new(id, DVector::from_vec(x))
    }

    fn params1(pi: f64, mu1: f64, mu0: f64, var: f64) -> ModelParams {
        ModelParams {
            pi,
            mu1: DVector::from_vec(vec![mu1]),
            mu0: DVector::from_vec(vec![mu0]),
            sigma: DMatrix::from_element(1, 1, var),
            alpha: 0.5,
        }
    }

    #[test]
    fn bag_loglik_single_negative_instance() {
        let ds = BagDataset::new(
            vec![Bag { bag_id: "0".into(), y: false, instances: vec![inst("0", vec![0.0])] }],
            1,
        );
        let ll = bag_loglik(&params1(0.5, 1.0, 0.0, 1.0), &ds).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-14);
    }

    #[test]
    fn bag_loglik_collapsed_mixture_ignores_pi() {
        let ds = BagDataset::new(
            vec![Bag {
                bag_id: "0".into(),
                y: true,
                instances: vec![inst("0", vec![0.3]), inst("1", vec![-0.4])],
            }],
            1,
        );
        let a = bag_loglik(&params1(0.1, 0.7, 0.7, 1.0), &ds).unwrap();
        let b = bag_loglik(&params1(0.9, 0.7, 0.7, 1.0), &ds).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn bag_loglik_matches_linear_domain_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(31, Stream::MonteCarlo, 0);
        for trial in 0..10 {
            let m = 1 + trial % 5;
            let mut bags = Vec::new();
            for b in 0..4 {
                let y = b % 2 == 0;
                let instances = (0..m)
                    .map(|j| inst(&j.to_string(), vec![rng.random::<f64>() * 4.0 - 2.0]))
                    .collect();
                bags.push(Bag { bag_id: b.to_string(), y, instances });
            }
            let ds = BagDataset::new(bags, 1);
            let params = params1(0.3, 1.2, -0.4, 0.8);
            let got = bag_loglik(&params, &ds).unwrap();

            // Linear-domain evaluation with explicit densities.
            let phi = |x: f64, mu: f64, var: f64| {
                (-0.5 * (x - mu) * (x - mu) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            };
            let mut want = 0.0;
            for bag in &ds.bags {
                for i in &bag.instances {
                    let x = i.x[0];
                    if bag.y {
                        want += (0.3 * phi(x, 1.2, 0.8) + 0.7 * phi(x, -0.4, 0.8)).ln();
                    } else {
                        want += phi(x, -0.4, 0.8).ln();
                    }
                }
            }
            assert_relative_eq!(got, want, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn symmetric_point_gets_half_responsibility() {
        // x equidistant from both means with pi = 1/2: the posterior is
        // exactly 1/2, so one M-step pulls pi to the clip-adjusted mean.
        let ds = BagDataset::new(
            vec![
                Bag { bag_id: "0".into(), y: true, instances: vec![inst("0", vec![0.0])] },
                Bag { bag_id: "1".into(), y: false, instances: vec![inst("0", vec![-1.0])] },
            ],
            1,
        );
        let next = em_step(&params1(0.5, 1.0, -1.0, 1.0), &ds).unwrap();
        assert_relative_eq!(next.pi, 0.5, max_relative = 1e-12);
    }

    fn sim_dataset(seed: u64, p: usize, n: usize, m: usize) -> (BagDataset, SimConfig) {
        let mut c = SimConfig::synthetic(p, 3.0, 0.3);
        c.n_bags = n;
        c.bag_size = m;
        c.pi = 0.2;
        c.alpha = 0.5;
        c.seed = seed;
        (simulate(&c).unwrap(), c)
    }

    #[test]
    fn em_step_near_fixed_point_at_truth() {
        let (ds, c) = sim_dataset(41, 2, 200, 500);
        let truth = crate::sim::effective_truth(&c).unwrap();
        let mut start = truth.clone();
        start.alpha = estimate_alpha(&ds).unwrap();
        let next = em_step(&start, &ds).unwrap();
        // One step from the truth moves by less than a few Monte-Carlo
        // standard errors (~1/sqrt(NM * pi) here).
        let scale = 1.0 / ((ds.n_instances() as f64) * truth.pi).sqrt();
        assert!((next.pi - truth.pi).abs() < 3.0 * scale, "pi moved {}", next.pi - truth.pi);
        assert!((&next.mu1 - &truth.mu1).amax() < 5.0 * scale);
        assert!((&next.mu0 - &truth.mu0).amax() < 5.0 * scale);
    }

    #[test]
    fn em_ascends_monotonically() {
        for seed in 0..10 {
            let (ds, _) = sim_dataset(100 + seed, 2, 20, 30);
            let mut params = moment_init(&ds).unwrap();
            let mut prev = bag_loglik(&params, &ds).unwrap();
            for _ in 0..50 {
                params = em_step(&params, &ds).unwrap();
                let cur = bag_loglik(&params, &ds).unwrap();
                assert!(cur >= prev - 1e-10, "descent: {prev} -> {cur}");
                prev = cur;
            }
        }
    }

    #[test]
    fn fit_trace_is_nondecreasing_and_converges() {
        let (ds, _) = sim_dataset(7, 3, 30, 40);
        let fit = fit_bmle(&ds, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn consistency_probe_mu1() {
        // Estimates across seeds center on the truth.
        let mut errs: Vec<DVector<f64>> = Vec::new();
        let mut truth = None;
        for seed in 0..10 {
            let mut c = SimConfig::synthetic(5, 3.0, 0.3);
            c.n_bags = 200;
            c.bag_size = 200;
            c.seed = 500 + seed;
            let ds = simulate(&c).unwrap();
            let fit = fit_bmle(&ds, &EmOptions::default()).unwrap();
            let t = crate::sim::effective_truth(&c).unwrap();
            errs.push(&fit.params.mu1 - &t.mu1);
            truth = Some(t);
        }
        let truth = truth.unwrap();
        let r = errs.len() as f64;
        for j in 0..truth.mu1.len() {
            let mean = errs.iter().map(|e| e[j]).sum::<f64>() / r;
            let var = errs.iter().map(|e| (e[j] - mean) * (e[j] - mean)).sum::<f64>() / (r - 1.0);
            let se = (var / r).sqrt();
            assert!(mean.abs() <= 3.0 * se + 0.02, "coord {j}: bias {mean} vs se {se}");
        }
    }

    #[test]
    fn no_positive_bags_is_an_error() {
        let ds = BagDataset::new(
            vec![Bag { bag_id: "0".into(), y: false, instances: vec![inst("0", vec![0.0])] }],
            1,
        );
        assert!(matches!(fit_bmle(&ds, &EmOptions::default()), Err(Error::NoPositiveBags)));
    }

    #[test]
    fn ignores_instance_labels_bitwise() {
        let (ds, _) = sim_dataset(9, 2, 20, 25);
        let mut masked = ds.clone();
        for bag in &mut masked.bags {
            for inst in &mut bag.instances {
                inst.a = InstanceLabel::Unobserved;
            }
        }
        let a = fit_bmle(&ds, &EmOptions::default()).unwrap();
        let b = fit_bmle(&masked, &EmOptions::default()).unwrap();
        assert_eq!(a.params.pi, b.params.pi);
        assert_eq!(a.params.mu1, b.params.mu1);
        assert_eq!(a.params.mu0, b.params.mu0);
        assert_eq!(a.params.sigma, b.params.sigma);
        assert_eq!(a.loglik_trace, b.loglik_trace);
    }

    #[test]
    fn mu0_lands_near_negative_bag_mean() {
        let (ds, _) = sim_dataset(3, 2, 30, 40);
        let fit = fit_bmle(&ds, &EmOptions::default()).unwrap();
        let mut neg_mean = DVector::zeros(2);
        let mut n = 0.0;
        for bag in ds.bags.iter().filter(|b| !b.y) {
            for inst in &bag.instances {
                neg_mean += &inst.x;
                n += 1.0;
            }
        }
        neg_mean /= n;
        let d0 = (&fit.params.mu0 - &neg_mean).norm();
        let d1 = (&fit.params.mu1 - &neg_mean).norm();
        assert!(d0 < d1, "mu0 should sit closer to the negative-bag mean");
    }

    #[test]
    fn grid_search_oracle_tiny_problem() {
        // p=1, N=6, M=3: EM against a refined grid over the four
        // parameters.
        for seed in 0..5 {
            let mut c = SimConfig::synthetic(1, 2.5, 0.0);
            c.n_bags = 6;
            c.bag_size = 3;
            c.alpha = 0.5;
            c.pi = 0.4;
            c.seed = 900 + seed;
            let ds = simulate(&c).unwrap();
            let fit = fit_bmle(&ds, &EmOptions::default()).unwrap();
            let em_ll = *fit.loglik_trace.last().unwrap();

            let xs: Vec<f64> =
                ds.bags.iter().flat_map(|b| b.instances.iter().map(|i| i.x[0])).collect();
            let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let xvar = {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
            };

            let eval = |pi: f64, mu1: f64, mu0: f64, var: f64| {
                bag_loglik(&params1(pi, mu1, mu0, var), &ds).unwrap()
            };
            // Iteratively refined 9^4 grid.
            let mut ranges =
                [(0.02, 0.98), (xmin, xmax), (xmin, xmax), (0.05 * xvar, 2.5 * xvar)];
            let mut best = (f64::NEG_INFINITY, [0.0; 4]);
            for _round in 0..6 {
                let steps = 9;
                let axis = |r: (f64, f64), k: usize| r.0 + (r.1 - r.0) * k as f64 / (steps - 1) as f64;
                for a in 0..steps {
                    for b in 0..steps {
                        for cc in 0..steps {
                            for d in 0..steps {
                                let pt = [
                                    axis(ranges[0], a),
                                    axis(ranges[1], b),
                                    axis(ranges[2], cc),
                                    axis(ranges[3], d),
                                ];
                                let ll = eval(pt[0], pt[1], pt[2], pt[3]);
                                if ll > best.0 {
                                    best = (ll, pt);
                                }
                            }
                        }
                    }
                }
                for (i, r) in ranges.iter_mut().enumerate() {
                    let width = (r.1 - r.0) / (steps - 1) as f64;
                    r.0 = best.1[i] - width;
                    r.1 = best.1[i] + width;
                }
                ranges[0].0 = ranges[0].0.max(1e-3);
                ranges[0].1 = ranges[0].1.min(1.0 - 1e-3);
                ranges[3].0 = ranges[3].0.max(1e-4);
            }
            assert!(
                em_ll >= best.0 - 1e-3,
                "seed {seed}: EM {em_ll} below grid {b}",
                b = best.0
            );
        }
    }

    #[test]
    fn random_restart_is_deterministic_and_no_worse() {
        let (ds, _) = sim_dataset(23, 2, 25, 30);
        let moment = fit_bmle(&ds, &EmOptions::default()).unwrap();
        let opts = EmOptions {
            init: InitStrategy::RandomRestart { restarts: 4, seed: 9 },
            ..EmOptions::default()
        };
        let a = fit_bmle(&ds, &opts).unwrap();
        let b = fit_bmle(&ds, &opts).unwrap();
        assert_eq!(a.params.mu1, b.params.mu1);
        assert_eq!(a.loglik_trace, b.loglik_trace);
        let best_restart = a.loglik_trace.last().unwrap();
        let moment_ll = moment.loglik_trace.last().unwrap();
        assert!(best_restart >= moment_ll, "restart {best_restart} vs moment {moment_ll}");
    }

    #[test]
    fn provided_init_dimension_mismatch_fails() {
        let (ds, _) = sim_dataset(24, 2, 10, 10);
        let opts = EmOptions {
            init: InitStrategy::Provided(params1(0.3, 1.0, 0.0, 1.0)),
            ..EmOptions::default()
        };
        assert!(matches!(fit_bmle(&ds, &opts), Err(Error::InitFailure(_))));
    }
}
