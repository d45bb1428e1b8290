//! Instance-based maximum likelihood estimator.
//!
//! With every instance label observed the likelihood separates and the
//! maximizer is available in closed form: `pi` is the positive fraction
//! inside positive bags, the class means are labeled feature means, and
//! the shared covariance is the pooled within-class scatter over the
//! total instance count. Unequal bag sizes are handled by replacing
//! `M * N1` with the total instance count of positive bags.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    log_gaussian_density_buf, pairwise_reduce, spd_factorize_default, symmetrize,
};
use crate::model::{estimate_alpha, BagDataset, EstimatorKind, FitResult, ModelParams};

struct Moments {
    n_inst: f64,
    n_pos_bag_inst: f64,
    sum_a: f64,
    sum_ax: DVector<f64>,
    sum_x: DVector<f64>,
}

impl Moments {
    fn combine(mut self, other: Moments) -> Moments {
        self.n_inst += other.n_inst;
        self.n_pos_bag_inst += other.n_pos_bag_inst;
        self.sum_a += other.sum_a;
        self.sum_ax += other.sum_ax;
        self.sum_x += other.sum_x;
        self
    }
}

fn label_of(dataset: &BagDataset, bag_idx: usize, inst_idx: usize) -> Result<f64> {
    let bag = &dataset.bags[bag_idx];
    let inst = &bag.instances[inst_idx];
    inst.a.as_f64().ok_or_else(|| Error::UnlabeledInstance {
        bag_id: bag.bag_id.clone(),
        instance_id: inst.instance_id.clone(),
    })
}

/// Closed-form fit from fully labeled instances.
pub fn fit_imle(dataset: &BagDataset) -> Result<FitResult> {
    if dataset.bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.n_positive_bags() == 0 {
        return Err(Error::NoPositiveBags);
    }
    let p = dataset.p;

    // First pass: counts and label-weighted feature sums.
    let leaf = |i: usize| -> Result<Moments> {
        let bag = &dataset.bags[i];
        let mut m = Moments {
            n_inst: bag.instances.len() as f64,
            n_pos_bag_inst: if bag.y { bag.instances.len() as f64 } else { 0.0 },
            sum_a: 0.0,
            sum_ax: DVector::zeros(p),
            sum_x: DVector::zeros(p),
        };
        for (j, inst) in bag.instances.iter().enumerate() {
            let a = label_of(dataset, i, j)?;
            m.sum_a += a;
            if a > 0.0 {
                m.sum_ax += &inst.x;
            }
            m.sum_x += &inst.x;
        }
        Ok(m)
    };
    let moments = pairwise_reduce(dataset.bags.len(), &leaf, &|a: Result<Moments>, b| {
        Ok(a?.combine(b?))
    })
    .expect("non-empty dataset")?;

    if moments.sum_a == 0.0 {
        return Err(Error::NoPositiveInstances);
    }
    let n_neg = moments.n_inst - moments.sum_a;
    if n_neg == 0.0 {
        return Err(Error::NoNegativeInstances);
    }

    let pi = moments.sum_a / moments.n_pos_bag_inst;
    let mu1 = &moments.sum_ax / moments.sum_a;
    let mu0 = (&moments.sum_x - &moments.sum_ax) / n_neg;

    // Second pass: pooled within-class scatter around the new means.
    let scatter_leaf = |i: usize| -> DMatrix<f64> {
        let bag = &dataset.bags[i];
        let mut s = DMatrix::zeros(p, p);
        for inst in &bag.instances {
            let positive = matches!(inst.a, crate::model::InstanceLabel::Positive);
            let d = if positive { &inst.x - &mu1 } else { &inst.x - &mu0 };
            s.ger(1.0, &d, &d, 1.0);
        }
        s
    };
    let scatter =
        pairwise_reduce(dataset.bags.len(), &scatter_leaf, &|a, b| a + b).expect("non-empty");
    let mut sigma = scatter / moments.n_inst;
    symmetrize(&mut sigma);

    let factor = spd_factorize_default(&sigma)?;
    let ridge_events = usize::from(factor.ridge_added() > 0.0);

    let params = ModelParams { pi, mu1, mu0, sigma, alpha: estimate_alpha(dataset)? };
    Ok(FitResult {
        params,
        estimator_kind: EstimatorKind::Imle,
        loglik_trace: Vec::new(),
        iterations: 0,
        converged: true,
        ridge_events,
    })
}

/// Fully labeled log-likelihood: label terms gated by the bag label plus
/// class-conditional Gaussian terms, all in log domain.
pub fn instance_loglik(params: &ModelParams, dataset: &BagDataset) -> Result<f64> {
    if dataset.bags.is_empty() {
        return Ok(0.0);
    }
    let factor = spd_factorize_default(&params.sigma)?;
    let log_pi = params.pi.ln();
    let log_1mpi = (1.0 - params.pi).ln();
    let p = dataset.p;
    let leaf = |i: usize| -> Result<f64> {
        let bag = &dataset.bags[i];
        let mut buf = vec![0.0; p];
        let mut ll = 0.0;
        for (j, inst) in bag.instances.iter().enumerate() {
            let a = label_of(dataset, i, j)?;
            if bag.y {
                ll += a * log_pi + (1.0 - a) * log_1mpi;
            }
            let mu = if a > 0.0 { &params.mu1 } else { &params.mu0 };
            ll += log_gaussian_density_buf(inst.x.as_slice(), mu.as_slice(), &factor, &mut buf);
        }
        Ok(ll)
    };
    pairwise_reduce(dataset.bags.len(), &leaf, &|a: Result<f64>, b| Ok(a? + b?))
        .expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{flatten, unflatten, Bag, Instance, InstanceLabel};
    use crate::sim::{simulate, SimConfig};
    use approx::assert_relative_eq;

    fn inst(id: &str, x: Vec<f64>, positive: bool) -> Instance {
        let mut i = Instance::new(id, DVector::from_vec(x));
        i.a = InstanceLabel::from_indicator(positive);
        i
    }

    #[test]
    fn tiny_two_bag_pi() {
        let bags = vec![
            Bag {
                bag_id: "0".into(),
                y: true,
                instances: vec![inst("0", vec![1.0], true), inst("1", vec![0.0], false)],
            },
            Bag {
                bag_id: "1".into(),
                y: false,
                instances: vec![inst("0", vec![0.1], false), inst("1", vec![-0.1], false)],
            },
        ];
        let ds = BagDataset::new(bags, 1);
        let fit = fit_imle(&ds).unwrap();
        assert_eq!(fit.params.pi, 0.5);
        assert_eq!(fit.params.alpha, 0.5);
    }

    #[test]
    fn zero_scatter_triggers_ridge() {
        let bags = vec![
            Bag { bag_id: "0".into(), y: true, instances: vec![inst("0", vec![2.0], true)] },
            Bag {
                bag_id: "1".into(),
                y: false,
                instances: vec![
                    inst("0", vec![0.0], false),
                    inst("1", vec![0.0], false),
                    inst("2", vec![0.0], false),
                ],
            },
        ];
        let ds = BagDataset::new(bags, 1);
        let fit = fit_imle(&ds).unwrap();
        assert_eq!(fit.params.mu1[0], 2.0);
        assert_eq!(fit.params.mu0[0], 0.0);
        assert_eq!(fit.params.sigma[(0, 0)], 0.0);
        assert_eq!(fit.ridge_events, 1);
    }

    #[test]
    fn error_paths() {
        let neg_only = BagDataset::new(
            vec![Bag {
                bag_id: "0".into(),
                y: false,
                instances: vec![inst("0", vec![0.0], false)],
            }],
            1,
        );
        assert!(matches!(fit_imle(&neg_only), Err(Error::NoPositiveBags)));

        let no_pos_inst = BagDataset::new(
            vec![
                Bag { bag_id: "0".into(), y: true, instances: vec![inst("0", vec![0.0], false)] },
                Bag { bag_id: "1".into(), y: false, instances: vec![inst("0", vec![1.0], false)] },
            ],
            1,
        );
        assert!(matches!(fit_imle(&no_pos_inst), Err(Error::NoPositiveInstances)));

        let mut unlabeled = no_pos_inst.clone();
        unlabeled.bags[0].instances[0].a = InstanceLabel::Unobserved;
        assert!(matches!(fit_imle(&unlabeled), Err(Error::UnlabeledInstance { .. })));
    }

    fn sim_dataset(seed: u64, p: usize, n: usize, m: usize, pi: f64) -> BagDataset {
        let mut c = SimConfig::synthetic(p, 3.0, 0.3);
        c.n_bags = n;
        c.bag_size = m;
        c.pi = pi;
        c.seed = seed;
        simulate(&c).unwrap()
    }

    #[test]
    fn loglik_single_negative_instance_at_mean() {
        let ds = BagDataset::new(
            vec![Bag { bag_id: "0".into(), y: false, instances: vec![inst("0", vec![0.0], false)] }],
            1,
        );
        let params = ModelParams {
            pi: 0.5,
            mu1: DVector::from_vec(vec![1.0]),
            mu0: DVector::from_vec(vec![0.0]),
            sigma: DMatrix::identity(1, 1),
            alpha: 0.0,
        };
        let ll = instance_loglik(&params, &ds).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-14);
    }

    #[test]
    fn loglik_empty_dataset_is_zero() {
        let ds = BagDataset::new(vec![], 1);
        let params = ModelParams {
            pi: 0.5,
            mu1: DVector::from_vec(vec![1.0]),
            mu0: DVector::from_vec(vec![0.0]),
            sigma: DMatrix::identity(1, 1),
            alpha: 0.0,
        };
        assert_eq!(instance_loglik(&params, &ds).unwrap(), 0.0);
    }

    #[test]
    fn fit_is_local_maximum() {
        use rand::Rng;
        let ds = sim_dataset(21, 2, 10, 20, 0.3);
        let fit = fit_imle(&ds).unwrap();
        let base = instance_loglik(&fit.params, &ds).unwrap();
        let mut rng = crate::rng::substream(3, crate::rng::Stream::MonteCarlo, 9);
        let theta = flatten(&fit.params).unwrap();
        for _ in 0..20 {
            let mut perturbed = theta.clone();
            for v in perturbed.iter_mut() {
                *v += 0.05 * (rng.random::<f64>() - 0.5);
            }
            perturbed[0] = perturbed[0].clamp(1e-4, 1.0 - 1e-4);
            if let Ok(params) = unflatten(&perturbed, 2, fit.params.alpha) {
                if let Ok(ll) = instance_loglik(&params, &ds) {
                    assert!(ll <= base + 1e-9, "perturbation improved: {ll} > {base}");
                }
            }
        }
    }

    #[test]
    fn invariant_to_bag_and_instance_permutation() {
        let ds = sim_dataset(11, 3, 12, 15, 0.3);
        let mut shuffled = ds.clone();
        shuffled.bags.reverse();
        for bag in &mut shuffled.bags {
            bag.instances.reverse();
        }
        let a = fit_imle(&ds).unwrap().params;
        let b = fit_imle(&shuffled).unwrap().params;
        assert_relative_eq!(a.pi, b.pi, max_relative = 1e-12);
        assert_relative_eq!(a.mu1, b.mu1, max_relative = 1e-12);
        assert_relative_eq!(a.mu0, b.mu0, max_relative = 1e-12);
        assert_relative_eq!(a.sigma, b.sigma, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn translation_equivariance() {
        let ds = sim_dataset(13, 2, 10, 20, 0.3);
        let shift = DVector::from_vec(vec![5.0, -2.0]);
        let mut moved = ds.clone();
        for bag in &mut moved.bags {
            for inst in &mut bag.instances {
                inst.x += &shift;
            }
        }
        let a = fit_imle(&ds).unwrap().params;
        let b = fit_imle(&moved).unwrap().params;
        assert_relative_eq!(a.pi, b.pi, max_relative = 1e-12);
        assert_relative_eq!(&a.mu1 + &shift, b.mu1, epsilon = 1e-10);
        assert_relative_eq!(&a.mu0 + &shift, b.mu0, epsilon = 1e-10);
        assert_relative_eq!(a.sigma, b.sigma, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_closed_form() {
        // Central finite differences of the fully labeled likelihood at
        // the closed-form estimate.
        let ds = sim_dataset(17, 2, 10, 25, 0.4);
        let fit = fit_imle(&ds).unwrap();
        let theta = flatten(&fit.params).unwrap();
        let alpha = fit.params.alpha;
        let mut sup = 0.0f64;
        for j in 0..theta.len() {
            let h = 6e-6 * (1.0 + theta[j].abs());
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let f_up = instance_loglik(&unflatten(&up, 2, alpha).unwrap(), &ds).unwrap();
            let f_dn = instance_loglik(&unflatten(&dn, 2, alpha).unwrap(), &ds).unwrap();
            sup = sup.max(((f_up - f_dn) / (2.0 * h)).abs());
        }
        assert!(sup <= 1e-6, "gradient sup-norm {sup}");
    }

    /// Independent oracle: cyclic coordinate ascent with golden-section
    /// line searches on the flattened likelihood.
    fn coordinate_ascent_oracle(ds: &BagDataset, start: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let p = ds.p;
        let eval = |theta: &DVector<f64>| -> f64 {
            match unflatten(theta, p, alpha) {
                Ok(params) if params.pi > 0.0 && params.pi < 1.0 => {
                    instance_loglik(&params, ds).unwrap_or(f64::NEG_INFINITY)
                }
                _ => f64::NEG_INFINITY,
            }
        };
        let golden = |theta: &DVector<f64>, j: usize, lo: f64, hi: f64| -> f64 {
            let phi = (5.0f64.sqrt() - 1.0) / 2.0;
            let mut a = lo;
            let mut b = hi;
            let mut t = theta.clone();
            let mut x1 = b - phi * (b - a);
            let mut x2 = a + phi * (b - a);
            t[j] = x1;
            let mut f1 = eval(&t);
            t[j] = x2;
            let mut f2 = eval(&t);
            for _ in 0..80 {
                if f1 < f2 {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    t[j] = x2;
                    f2 = eval(&t);
                } else {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    t[j] = x1;
                    f1 = eval(&t);
                }
            }
            0.5 * (a + b)
        };
        let mut theta = start.clone();
        for _ in 0..60 {
            let before = theta.clone();
            for j in 0..theta.len() {
                let width = if j == 0 { 0.2 } else { 0.5 * (1.0 + theta[j].abs()) };
                let (lo, hi) = if j == 0 {
                    ((theta[j] - width).max(1e-4), (theta[j] + width).min(1.0 - 1e-4))
                } else {
                    (theta[j] - width, theta[j] + width)
                };
                theta[j] = golden(&theta, j, lo, hi);
            }
            if (&theta - &before).amax() < 1e-9 {
                break;
            }
        }
        theta
    }

    #[test]
    fn matches_numerical_maximizer() {
        let ds = sim_dataset(19, 3, 20, 30, 0.3);
        let fit = fit_imle(&ds).unwrap();
        let closed = flatten(&fit.params).unwrap();
        // Start the generic maximizer away from the closed form.
        let mut start = closed.clone();
        for v in start.iter_mut() {
            *v *= 0.9;
        }
        start[0] = 0.5;
        let numeric = coordinate_ascent_oracle(&ds, &start, fit.params.alpha);
        for j in 0..closed.len() {
            assert!(
                (closed[j] - numeric[j]).abs() <= 1e-4,
                "coordinate {j}: closed {} vs numeric {}",
                closed[j],
                numeric[j]
            );
        }
    }
}
