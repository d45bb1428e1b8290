//! Posterior-guided subsampling design.
//!
//! Instances in positive bags are revealed with probability
//! `gamma_im = logistic(alpha_n + x' beta)`, so instances that look
//! positive under the direction `beta = Omega (mu1 - mu0)` are labeled
//! preferentially. `beta` comes from a pilot bag-level fit (possibly on
//! a reduced bag subset), and the intercept `alpha_n` is calibrated by
//! bisection so the expected revealed fraction hits a target. Negative
//! bags are never subsampled; their labels are structural zeros.

use nalgebra::DVector;
use rand::Rng;

use crate::bmle::{fit_bmle, EmOptions};
use crate::error::{Error, Result};
use crate::linalg::{logistic, spd_factorize_default};
use crate::model::{BagDataset, FitResult};
use crate::rng::{substream, Stream};

/// A realized subsampling design: probabilities, indicators, and the
/// metadata needed to reproduce or audit the draw.
#[derive(Debug, Clone)]
pub struct SubsamplePlan {
    pub alpha_n: f64,
    pub beta: DVector<f64>,
    /// Per bag, per instance; exactly zero for negative bags.
    pub gamma: Vec<Vec<f64>>,
    pub indicators: Vec<Vec<bool>>,
    /// Share of positive-bag instances actually revealed.
    pub realized_fraction: f64,
    /// Pilot bag fraction used for `beta`, when the plan came from the
    /// full pipeline. Zero encodes the uniform scheme, infinity the true
    /// direction.
    pub pilot_fraction: Option<f64>,
    pub seed: u64,
}

impl SubsamplePlan {
    pub fn realized_count(&self) -> usize {
        self.indicators.iter().map(|b| b.iter().filter(|&&s| s).count()).sum()
    }

    /// Copies the indicators onto a dataset. Labels of revealed
    /// instances stay observed; nothing else changes.
    pub fn apply(&self, dataset: &BagDataset) -> Result<BagDataset> {
        self.check_shape(dataset)?;
        let mut out = dataset.clone();
        for (bag, inds) in out.bags.iter_mut().zip(&self.indicators) {
            for (inst, &s) in bag.instances.iter_mut().zip(inds) {
                inst.s = s;
            }
        }
        Ok(out)
    }

    /// The external view of a subsampled dataset: indicators set and
    /// positive-bag labels hidden wherever `s = 0`. Negative-bag labels
    /// stay observed because the bag label already implies them.
    pub fn apply_masked(&self, dataset: &BagDataset) -> Result<BagDataset> {
        let mut out = self.apply(dataset)?;
        for bag in out.bags.iter_mut().filter(|b| b.y) {
            for inst in &mut bag.instances {
                if !inst.s {
                    inst.a = crate::model::InstanceLabel::Unobserved;
                }
            }
        }
        Ok(out)
    }

    fn check_shape(&self, dataset: &BagDataset) -> Result<()> {
        if self.indicators.len() != dataset.bags.len()
            || self
                .indicators
                .iter()
                .zip(&dataset.bags)
                .any(|(inds, bag)| inds.len() != bag.instances.len())
        {
            return Err(Error::InconsistentSubsample(
                "plan shape does not match dataset".into(),
            ));
        }
        Ok(())
    }
}

/// `logistic(alpha_n + x' beta)`, stable for large magnitudes.
pub fn gamma_probability(x: &DVector<f64>, alpha_n: f64, beta: &DVector<f64>) -> f64 {
    logistic(alpha_n + x.dot(beta))
}

/// Subsampling direction from a fit: `Omega (mu1 - mu0)`.
pub fn beta_from_fit(fit: &FitResult) -> Result<DVector<f64>> {
    beta_from_params(&fit.params)
}

pub fn beta_from_params(params: &crate::model::ModelParams) -> Result<DVector<f64>> {
    let factor = spd_factorize_default(&params.sigma)?;
    Ok(factor.solve_vec(&(&params.mu1 - &params.mu0)))
}

/// Pilot estimate of the subsampling direction.
///
/// `pilot_fraction` in `(0, 1]` fits the bag-level EM on that share of
/// bags (at least one positive and one negative bag are forced in).
/// Zero selects the uniform scheme: the returned direction is the zero
/// vector, which makes every `gamma_im` equal.
pub fn pilot_beta(
    dataset: &BagDataset,
    pilot_fraction: f64,
    options: &EmOptions,
    seed: u64,
) -> Result<DVector<f64>> {
    if pilot_fraction == 0.0 {
        return Ok(DVector::zeros(dataset.p));
    }
    if !(0.0..=1.0).contains(&pilot_fraction) {
        return Err(Error::InvalidConfig(format!(
            "pilot_fraction {pilot_fraction} outside [0,1]"
        )));
    }
    let n = dataset.bags.len();
    let fit = if pilot_fraction >= 1.0 {
        fit_bmle(dataset, options)?
    } else {
        let take = ((pilot_fraction * n as f64).ceil() as usize).min(n);
        if take < 2 {
            return Err(Error::PilotTooSmall(format!(
                "{take} bag(s) selected; need at least one positive and one negative"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = substream(seed, Stream::Pilot, 0);
        // Fisher-Yates for the first `take` slots.
        for i in 0..take {
            let j = i + rng.random_range(0..(n - i));
            order.swap(i, j);
        }
        let mut chosen: Vec<usize> = order[..take].to_vec();
        let has_pos = chosen.iter().any(|&i| dataset.bags[i].y);
        let has_neg = chosen.iter().any(|&i| !dataset.bags[i].y);
        if !has_pos || !has_neg {
            let needed = !has_pos;
            let candidates: Vec<usize> = order[take..]
                .iter()
                .copied()
                .filter(|&i| dataset.bags[i].y == needed)
                .collect();
            let Some(&swap_in) = candidates.first() else {
                return Err(Error::PilotTooSmall(
                    "dataset lacks a bag class required by the pilot".into(),
                ));
            };
            // Replace one bag of the over-represented class.
            let k = chosen
                .iter()
                .position(|&i| dataset.bags[i].y != needed)
                .expect("over-represented class present");
            chosen[k] = swap_in;
        }
        chosen.sort_unstable();
        let bags = chosen.iter().map(|&i| dataset.bags[i].clone()).collect();
        let pilot = BagDataset::new(bags, dataset.p);
        fit_bmle(&pilot, options)?
    };
    beta_from_fit(&fit)
}

fn positive_bag_scores(dataset: &BagDataset, beta: &DVector<f64>) -> Vec<f64> {
    dataset
        .bags
        .iter()
        .filter(|b| b.y)
        .flat_map(|b| b.instances.iter().map(|i| i.x.dot(beta)))
        .collect()
}

/// Intercept such that the mean of `gamma_im` over positive-bag
/// instances equals `target_fraction` within 1e-6, by bisection over
/// `[-60, 60]`.
pub fn calibrate_alpha_n(
    beta: &DVector<f64>,
    dataset: &BagDataset,
    target_fraction: f64,
) -> Result<f64> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target_fraction {target_fraction} outside (0,1)"
        )));
    }
    let scores = positive_bag_scores(dataset, beta);
    if scores.is_empty() {
        return Err(Error::NoPositiveBags);
    }
    let mean_gamma =
        |a: f64| scores.iter().map(|&t| logistic(a + t)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    let (f_lo, f_hi) = (mean_gamma(lo), mean_gamma(hi));
    if f_lo > target_fraction || f_hi < target_fraction {
        return Err(Error::TargetUnreachable { target: target_fraction, lo: f_lo, hi: f_hi });
    }
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f = mean_gamma(mid);
        if (f - target_fraction).abs() <= 1e-9 {
            return Ok(mid);
        }
        if f < target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    if (mean_gamma(mid) - target_fraction).abs() <= 1e-6 {
        Ok(mid)
    } else {
        Err(Error::TargetUnreachable { target: target_fraction, lo: f_lo, hi: f_hi })
    }
}

/// Draws indicators `S_im ~ Bernoulli(gamma_im)` on per-bag substreams.
/// Drawing depends only on features, bag labels, and the seed, so the
/// design is missing-at-random by construction. Every revealed instance
/// must carry an observable label.
pub fn draw_subsample(
    dataset: &BagDataset,
    alpha_n: f64,
    beta: &DVector<f64>,
    seed: u64,
) -> Result<SubsamplePlan> {
    if beta.len() != dataset.p {
        return Err(Error::DimensionMismatch { expected: dataset.p, got: beta.len() });
    }
    let mut gamma = Vec::with_capacity(dataset.bags.len());
    let mut indicators = Vec::with_capacity(dataset.bags.len());
    let mut revealed = 0usize;
    for (bi, bag) in dataset.bags.iter().enumerate() {
        let mut g = vec![0.0; bag.instances.len()];
        let mut s = vec![false; bag.instances.len()];
        if bag.y {
            let mut rng = substream(seed, Stream::Subsample, bi as u64);
            for (j, inst) in bag.instances.iter().enumerate() {
                g[j] = gamma_probability(&inst.x, alpha_n, beta);
                s[j] = rng.random::<f64>() < g[j];
                if s[j] {
                    if !inst.a.is_observed() {
                        return Err(Error::MissingTruthLabel {
                            bag_id: bag.bag_id.clone(),
                            instance_id: inst.instance_id.clone(),
                        });
                    }
                    revealed += 1;
                }
            }
        }
        gamma.push(g);
        indicators.push(s);
    }
    let denom = dataset.n_positive_bag_instances();
    let realized_fraction = if denom == 0 { 0.0 } else { revealed as f64 / denom as f64 };
    Ok(SubsamplePlan {
        alpha_n,
        beta: beta.clone(),
        gamma,
        indicators,
        realized_fraction,
        pilot_fraction: None,
        seed,
    })
}

/// Full design pipeline: pilot direction, intercept calibration, and
/// the indicator draw.
pub fn design_subsample(
    dataset: &BagDataset,
    pilot_fraction: f64,
    target_fraction: f64,
    options: &EmOptions,
    seed: u64,
) -> Result<SubsamplePlan> {
    let beta = pilot_beta(dataset, pilot_fraction, options, seed)?;
    let alpha_n = calibrate_alpha_n(&beta, dataset, target_fraction)?;
    let mut plan = draw_subsample(dataset, alpha_n, &beta, seed)?;
    plan.pilot_fraction = Some(pilot_fraction);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceLabel;
    use crate::sim::{simulate, SimConfig};
    use approx::assert_relative_eq;

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
    fn gamma_closed_forms() {
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let zero = DVector::zeros(2);
        assert_eq!(gamma_probability(&x, 0.0, &zero), 0.5);
        assert!((gamma_probability(&x, 50.0, &zero) - 1.0).abs() < 1e-15);
        assert_relative_eq!(
            gamma_probability(&x, (1.0f64 / 3.0).ln(), &zero),
            0.25,
            max_relative = 1e-12
        );
    }

    #[test]
    fn pilot_full_fraction_equals_full_sample_fit() {
        let (ds, _) = sim_dataset(61, 2, 20, 25);
        let opts = EmOptions::default();
        let from_pilot = pilot_beta(&ds, 1.0, &opts, 3).unwrap();
        let direct = beta_from_fit(&fit_bmle(&ds, &opts).unwrap()).unwrap();
        assert_eq!(from_pilot, direct);
    }

    #[test]
    fn pilot_zero_fraction_is_uniform_scheme() {
        let (ds, _) = sim_dataset(62, 3, 10, 10);
        let beta = pilot_beta(&ds, 0.0, &EmOptions::default(), 3).unwrap();
        assert_eq!(beta, DVector::zeros(3));
        // Constant direction means constant probabilities.
        let g: Vec<f64> = ds
            .bags
            .iter()
            .filter(|b| b.y)
            .flat_map(|b| b.instances.iter().map(|i| gamma_probability(&i.x, -1.0, &beta)))
            .collect();
        assert!(g.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn pilot_direction_improves_with_fraction() {
        // Cosine similarity with the true direction increases with the
        // pilot share.
        let opts = EmOptions::default();
        let mut mean_cos = [0.0f64; 3];
        let fracs = [0.1, 0.5, 1.0];
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let mut c = SimConfig::synthetic(3, 3.0, 0.3);
            c.n_bags = 60;
            c.bag_size = 40;
            c.pi = 0.2;
            c.alpha = 0.5;
            c.seed = 400 + seed;
            let ds = simulate(&c).unwrap();
            let truth = crate::sim::effective_truth(&c).unwrap();
            let true_beta = beta_from_params(&truth).unwrap();
            for (k, &f) in fracs.iter().enumerate() {
                let b = pilot_beta(&ds, f, &opts, 70 + seed).unwrap();
                let cos = b.dot(&true_beta) / (b.norm() * true_beta.norm());
                mean_cos[k] += cos / n_seeds as f64;
            }
        }
        assert!(
            mean_cos[0] < mean_cos[1] && mean_cos[1] < mean_cos[2],
            "cosines {mean_cos:?}"
        );
    }

    #[test]
    fn pilot_too_small() {
        let (ds, _) = sim_dataset(63, 2, 10, 5);
        assert!(matches!(
            pilot_beta(&ds, 0.05, &EmOptions::default(), 3),
            Err(Error::PilotTooSmall(_))
        ));
    }

    #[test]
    fn calibrate_constant_direction_closed_form() {
        let (ds, _) = sim_dataset(164, 2, 10, 10);
        let beta = DVector::zeros(2);
        let a = calibrate_alpha_n(&beta, &ds, 0.25).unwrap();
        assert!((a - (1.0f64 / 3.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn calibrate_hits_target_mean() {
        let (ds, _) = sim_dataset(65, 3, 30, 30);
        let beta = DVector::from_vec(vec![0.8, -0.3, 0.5]);
        let a = calibrate_alpha_n(&beta, &ds, 0.10).unwrap();
        let scores: Vec<f64> = positive_bag_scores(&ds, &beta);
        let mean: f64 =
            scores.iter().map(|&t| logistic(a + t)).sum::<f64>() / scores.len() as f64;
        assert!((mean - 0.10).abs() <= 1e-6, "mean gamma {mean}");
    }

    #[test]
    fn calibrate_monotone_in_target() {
        let (ds, _) = sim_dataset(66, 2, 20, 20);
        let beta = DVector::from_vec(vec![0.5, 0.5]);
        let a1 = calibrate_alpha_n(&beta, &ds, 0.05).unwrap();
        let a2 = calibrate_alpha_n(&beta, &ds, 0.2).unwrap();
        let a3 = calibrate_alpha_n(&beta, &ds, 0.7).unwrap();
        assert!(a1 < a2 && a2 < a3);
    }

    #[test]
    fn calibrate_unreachable_target() {
        let (mut ds, _) = sim_dataset(67, 1, 6, 5);
        // Push every positive-bag score far beyond the intercept range.
        for bag in ds.bags.iter_mut().filter(|b| b.y) {
            for inst in &mut bag.instances {
                inst.x[0] = 200.0;
            }
        }
        let beta = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            calibrate_alpha_n(&beta, &ds, 0.5),
            Err(Error::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn draw_limits() {
        let (ds, _) = sim_dataset(68, 2, 15, 12);
        let beta = DVector::zeros(2);
        let none = draw_subsample(&ds, -60.0, &beta, 1).unwrap();
        assert_eq!(none.realized_count(), 0);
        let all = draw_subsample(&ds, 60.0, &beta, 1).unwrap();
        assert_eq!(all.realized_count(), ds.n_positive_bag_instances());
        // Negative bags are never touched.
        for (bag, inds) in ds.bags.iter().zip(&all.indicators) {
            if !bag.y {
                assert!(inds.iter().all(|&s| !s));
            }
        }
    }

    #[test]
    fn realized_fraction_concentrates_on_target() {
        let (ds, _) = sim_dataset(69, 2, 40, 50);
        let beta = DVector::from_vec(vec![0.6, -0.2]);
        let alpha_n = calibrate_alpha_n(&beta, &ds, 0.10).unwrap();
        let n = ds.n_positive_bag_instances() as f64;
        let mut mean = 0.0;
        let reps = 50;
        for seed in 0..reps {
            let plan = draw_subsample(&ds, alpha_n, &beta, seed).unwrap();
            mean += plan.realized_fraction / reps as f64;
        }
        let se = (0.10 * 0.90 / (n * reps as f64)).sqrt();
        assert!((mean - 0.10).abs() <= 3.0 * se, "mean fraction {mean}");
    }

    #[test]
    fn missing_truth_label_detected() {
        let (mut ds, _) = sim_dataset(70, 2, 10, 8);
        for bag in ds.bags.iter_mut().filter(|b| b.y) {
            bag.instances[0].a = InstanceLabel::Unobserved;
        }
        let beta = DVector::zeros(2);
        assert!(matches!(
            draw_subsample(&ds, 60.0, &beta, 2),
            Err(Error::MissingTruthLabel { .. })
        ));
    }

    #[test]
    fn indicators_ignore_label_values() {
        // Missing-at-random contract: permuting labels leaves the draw
        // untouched.
        let (ds, _) = sim_dataset(71, 2, 12, 10);
        let mut permuted = ds.clone();
        for bag in permuted.bags.iter_mut().filter(|b| b.y) {
            let mut labels: Vec<InstanceLabel> =
                bag.instances.iter().map(|i| i.a).collect();
            labels.rotate_left(3);
            for (inst, a) in bag.instances.iter_mut().zip(labels) {
                inst.a = a;
            }
        }
        let beta = DVector::from_vec(vec![0.4, 0.1]);
        let a = draw_subsample(&ds, -1.0, &beta, 5).unwrap();
        let b = draw_subsample(&permuted, -1.0, &beta, 5).unwrap();
        assert_eq!(a.indicators, b.indicators);
    }

    #[test]
    fn gamma_preserves_score_ranking() {
        let (ds, _) = sim_dataset(72, 2, 10, 10);
        let beta = DVector::from_vec(vec![1.0, -0.5]);
        let plan = draw_subsample(&ds, -1.0, &beta, 6).unwrap();
        for (bag, g) in ds.bags.iter().zip(&plan.gamma) {
            if !bag.y {
                continue;
            }
            let mut scored: Vec<(f64, f64)> = bag
                .instances
                .iter()
                .zip(g)
                .map(|(i, &gi)| (i.x.dot(&beta), gi))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in scored.windows(2) {
                assert!(w[0].1 <= w[1].1 + 1e-15);
            }
        }
    }
}
