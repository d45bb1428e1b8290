//! Parameter and dataset containers.
//!
//! [`ModelParams`] is the canonical parameter block
//! `Theta = (pi, mu1', mu0', vech(Omega)')'` plus the bag prevalence
//! `alpha`, which is always estimated separately as the mean bag label.
//! [`BagDataset`] holds bags of instances; instance labels are ternary
//! (unobserved / 0 / 1) so that subsampling semantics (`s = 1` implies a
//! revealed label) can be validated in one place.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_factorize_default, unvech, vech};

/// Ternary instance label: the ground truth may be hidden from an
/// estimator without being absent from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceLabel {
    Unobserved,
    Negative,
    Positive,
}

impl InstanceLabel {
    pub fn is_observed(self) -> bool {
        !matches!(self, InstanceLabel::Unobserved)
    }

    pub fn as_f64(self) -> Option<f64> {
        match self {
            InstanceLabel::Unobserved => None,
            InstanceLabel::Negative => Some(0.0),
            InstanceLabel::Positive => Some(1.0),
        }
    }

    pub fn from_indicator(positive: bool) -> Self {
        if positive {
            InstanceLabel::Positive
        } else {
            InstanceLabel::Negative
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub instance_id: String,
    pub x: DVector<f64>,
    pub a: InstanceLabel,
    /// Subsampling indicator `S`; `true` means the label was revealed by
    /// the subsampling design.
    pub s: bool,
    pub loc: Option<[f64; 2]>,
}

impl Instance {
    pub fn new(instance_id: impl Into<String>, x: DVector<f64>) -> Self {
        Instance {
            instance_id: instance_id.into(),
            x,
            a: InstanceLabel::Unobserved,
            s: false,
            loc: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bag {
    pub bag_id: String,
    /// Bag label `Y`.
    pub y: bool,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone)]
pub struct BagDataset {
    pub bags: Vec<Bag>,
    /// Feature dimension shared by every instance.
    pub p: usize,
}

impl BagDataset {
    pub fn new(bags: Vec<Bag>, p: usize) -> Self {
        BagDataset { bags, p }
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(|b| b.instances.len()).sum()
    }

    pub fn n_positive_bags(&self) -> usize {
        self.bags.iter().filter(|b| b.y).count()
    }

    /// Instance count over positive bags only.
    pub fn n_positive_bag_instances(&self) -> usize {
        self.bags.iter().filter(|b| b.y).map(|b| b.instances.len()).sum()
    }

    /// True when all bags have the same number of instances; study
    /// runners require this.
    pub fn common_bag_size(&self) -> Option<usize> {
        let mut sizes = self.bags.iter().map(|b| b.instances.len());
        let first = sizes.next()?;
        sizes.all(|m| m == first).then_some(first)
    }
}

/// One structural violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch { bag_id: String, instance_id: String, got: usize, expected: usize },
    PositiveLabelInNegativeBag { bag_id: String, instance_id: String },
    SubsampledWithoutLabel { bag_id: String, instance_id: String },
    EmptyBag { bag_id: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DimensionMismatch { bag_id, instance_id, got, expected } => write!(
                f,
                "bag {bag_id} instance {instance_id}: dimension {got}, expected {expected}"
            ),
            Violation::PositiveLabelInNegativeBag { bag_id, instance_id } => {
                write!(f, "bag {bag_id} instance {instance_id}: a=1 inside a y=0 bag")
            }
            Violation::SubsampledWithoutLabel { bag_id, instance_id } => {
                write!(f, "bag {bag_id} instance {instance_id}: s=1 but label unobserved")
            }
            Violation::EmptyBag { bag_id } => write!(f, "bag {bag_id}: no instances"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the structural dataset invariants: shared feature dimension,
/// no positive label inside a negative bag, and `s = 1` only where the
/// label is observed. Reporting, never failing.
pub fn validate(dataset: &BagDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    for bag in &dataset.bags {
        if bag.instances.is_empty() {
            report.violations.push(Violation::EmptyBag { bag_id: bag.bag_id.clone() });
        }
        for inst in &bag.instances {
            if inst.x.len() != dataset.p {
                report.violations.push(Violation::DimensionMismatch {
                    bag_id: bag.bag_id.clone(),
                    instance_id: inst.instance_id.clone(),
                    got: inst.x.len(),
                    expected: dataset.p,
                });
            }
            if !bag.y && inst.a == InstanceLabel::Positive {
                report.violations.push(Violation::PositiveLabelInNegativeBag {
                    bag_id: bag.bag_id.clone(),
                    instance_id: inst.instance_id.clone(),
                });
            }
            if inst.s && !inst.a.is_observed() {
                report.violations.push(Violation::SubsampledWithoutLabel {
                    bag_id: bag.bag_id.clone(),
                    instance_id: inst.instance_id.clone(),
                });
            }
        }
    }
    report
}

/// Mean bag label, the natural estimator of the bag prevalence.
pub fn estimate_alpha(dataset: &BagDataset) -> Result<f64> {
    if dataset.bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let positives = dataset.n_positive_bags() as f64;
    Ok(positives / dataset.n_bags() as f64)
}

/// Parameter block of the Gaussian mixture: mixing probability `pi`,
/// class means, shared covariance, and the bag prevalence `alpha`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub pi: f64,
    pub mu1: DVector<f64>,
    pub mu0: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub alpha: f64,
}

impl ModelParams {
    pub fn p(&self) -> usize {
        self.mu1.len()
    }

    /// Length of the flattened vector `(pi, mu1, mu0, vech(Omega))`:
    /// `q = p^2/2 + 5p/2 + 1`.
    pub fn q(&self) -> usize {
        param_len(self.p())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidConfig(format!("pi = {} outside (0,1)", self.pi)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} outside [0,1]", self.alpha)));
        }
        let p = self.p();
        if self.mu0.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: self.mu0.len() });
        }
        if self.sigma.nrows() != p || self.sigma.ncols() != p {
            return Err(Error::DimensionMismatch { expected: p, got: self.sigma.nrows() });
        }
        spd_factorize_default(&self.sigma)?;
        Ok(())
    }
}

/// `q` for feature dimension `p`.
pub fn param_len(p: usize) -> usize {
    1 + 2 * p + p * (p + 1) / 2
}

/// Flattens to `(pi, mu1, mu0, vech(Omega))` with `Omega = Sigma^{-1}`
/// obtained through the ridge-guarded Cholesky.
pub fn flatten(params: &ModelParams) -> Result<DVector<f64>> {
    let p = params.p();
    let factor = spd_factorize_default(&params.sigma)?;
    let omega = factor.inverse();
    let mut out = Vec::with_capacity(param_len(p));
    out.push(params.pi);
    out.extend_from_slice(params.mu1.as_slice());
    out.extend_from_slice(params.mu0.as_slice());
    out.extend_from_slice(&vech(&omega));
    Ok(DVector::from_vec(out))
}

/// Inverse of [`flatten`]; `alpha` is not part of the flattened vector
/// and is restored as the supplied value.
pub fn unflatten(theta: &DVector<f64>, p: usize, alpha: f64) -> Result<ModelParams> {
    let q = param_len(p);
    if theta.len() != q {
        return Err(Error::DimensionMismatch { expected: q, got: theta.len() });
    }
    let pi = theta[0];
    let mu1 = DVector::from_column_slice(&theta.as_slice()[1..1 + p]);
    let mu0 = DVector::from_column_slice(&theta.as_slice()[1 + p..1 + 2 * p]);
    let omega = unvech(&theta.as_slice()[1 + 2 * p..], p);
    let factor = spd_factorize_default(&omega)?;
    let sigma = factor.inverse();
    Ok(ModelParams { pi, mu1, mu0, sigma, alpha })
}

/// Which estimator produced a [`FitResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Imle,
    Bmle,
    Smle,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Imle => "imle",
            EstimatorKind::Bmle => "bmle",
            EstimatorKind::Smle => "smle",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imle" => Ok(EstimatorKind::Imle),
            "bmle" => Ok(EstimatorKind::Bmle),
            "smle" => Ok(EstimatorKind::Smle),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Output of a fit: estimates plus convergence diagnostics. The trace is
/// empty for the closed-form IMLE.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub estimator_kind: EstimatorKind,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// How many covariance factorizations needed a nonzero ridge.
    pub ridge_events: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_instance(id: &str, x: Vec<f64>, a: InstanceLabel) -> Instance {
        let mut inst = Instance::new(id, DVector::from_vec(x));
        inst.a = a;
        inst
    }

    #[test]
    fn validate_clean_negative_bag() {
        let bag = Bag {
            bag_id: "b0".into(),
            y: false,
            instances: vec![
                unit_instance("i0", vec![0.0], InstanceLabel::Negative),
                unit_instance("i1", vec![1.0], InstanceLabel::Negative),
            ],
        };
        let ds = BagDataset::new(vec![bag], 1);
        assert!(validate(&ds).is_valid());
    }

    #[test]
    fn validate_flags_positive_label_in_negative_bag() {
        let bag = Bag {
            bag_id: "b0".into(),
            y: false,
            instances: vec![unit_instance("i0", vec![0.0], InstanceLabel::Positive)],
        };
        let ds = BagDataset::new(vec![bag], 1);
        let report = validate(&ds);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::PositiveLabelInNegativeBag { .. }));
    }

    #[test]
    fn validate_flags_subsampled_without_label() {
        let mut inst = unit_instance("i0", vec![0.0], InstanceLabel::Unobserved);
        inst.s = true;
        let bag = Bag { bag_id: "b0".into(), y: true, instances: vec![inst] };
        let ds = BagDataset::new(vec![bag], 1);
        let report = validate(&ds);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::SubsampledWithoutLabel { .. }));
    }

    fn labeled_dataset(labels: &[bool]) -> BagDataset {
        let bags = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| Bag {
                bag_id: format!("b{i}"),
                y,
                instances: vec![unit_instance("i0", vec![0.0], InstanceLabel::Negative)],
            })
            .collect();
        BagDataset::new(bags, 1)
    }

    #[test]
    fn alpha_is_mean_bag_label() {
        let ds = labeled_dataset(&[true, false, true, false]);
        assert_eq!(estimate_alpha(&ds).unwrap(), 0.5);
        let ds = labeled_dataset(&[false, false, false]);
        assert_eq!(estimate_alpha(&ds).unwrap(), 0.0);
    }

    #[test]
    fn alpha_matches_reported_prevalence() {
        // 88 positives out of 247 bags: prevalence ~0.356.
        let labels: Vec<bool> = (0..247).map(|i| i < 88).collect();
        let ds = labeled_dataset(&labels);
        let a = estimate_alpha(&ds).unwrap();
        assert_relative_eq!(a, 88.0 / 247.0, max_relative = 1e-15);
        assert!((a - 0.356).abs() < 1e-3);
    }

    #[test]
    fn alpha_empty_dataset_errors() {
        let ds = BagDataset::new(vec![], 1);
        assert!(matches!(estimate_alpha(&ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn q_formula() {
        assert_eq!(param_len(1), 4);
        assert_eq!(param_len(50), 1376);
    }

    fn random_params(p: usize, seed: u64) -> ModelParams {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, crate::rng::Stream::MonteCarlo, 17);
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let mut sigma = &a * a.transpose();
        for i in 0..p {
            sigma[(i, i)] += 1.0 + p as f64 * 0.25;
        }
        ModelParams {
            pi: 0.2 + 0.6 * rng.random::<f64>(),
            mu1: DVector::from_fn(p, |_, _| rng.random::<f64>() * 2.0),
            mu0: DVector::from_fn(p, |_, _| -rng.random::<f64>()),
            sigma,
            alpha: 0.4,
        }
    }

    #[test]
    fn flatten_roundtrip() {
        for (i, &p) in [1usize, 2, 5, 10].iter().enumerate() {
            let params = random_params(p, 100 + i as u64);
            let theta = flatten(&params).unwrap();
            assert_eq!(theta.len(), param_len(p));
            let back = unflatten(&theta, p, params.alpha).unwrap();
            assert_relative_eq!(back.pi, params.pi, epsilon = 1e-12);
            assert_relative_eq!(back.mu1, params.mu1, epsilon = 1e-12);
            assert_relative_eq!(back.mu0, params.mu0, epsilon = 1e-12);
            assert_relative_eq!(back.sigma, params.sigma, epsilon = 1e-9, max_relative = 1e-10);
        }
    }

    #[test]
    fn unflatten_rejects_bad_length() {
        let theta = DVector::zeros(5);
        assert!(matches!(unflatten(&theta, 2, 0.5), Err(Error::DimensionMismatch { .. })));
    }
}
