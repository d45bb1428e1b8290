//! Synthetic dataset generation.
//!
//! The base regime draws `Y_i ~ Bernoulli(alpha)`, instance labels
//! `A_im ~ Bernoulli(pi)` inside positive bags, and features
//! `X_im ~ N(mu_A, sigma_scale * Sigma)`. Four mis-specified regimes
//! perturb one assumption each: a bag-specific mixing probability, a
//! spatially varying mixing probability, a Gaussian random field on the
//! features, and a truncated label vector that forbids all-negative
//! positive bags.
//!
//! Bags are generated on independent substreams keyed by bag index, so
//! generation is deterministic under any scheduling and regimes that
//! degenerate to the base model reproduce it draw for draw. Ground-truth
//! labels are always stored; estimators decide what to ignore.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::linalg::{spd_factorize_default, SpdFactor};
use crate::model::{Bag, BagDataset, Instance, InstanceLabel, ModelParams};
use crate::rng::{substream, Stream};

/// Distribution of the bag-specific mixing probability in the
/// heterogeneous regime. Its mean must equal the configured `pi`.
#[derive(Debug, Clone)]
pub enum HeteroPiDistribution {
    /// Beta with mean `pi` and the given concentration (`a + b`).
    BetaWithMean { concentration: f64 },
    /// Uniform draw from a fixed list of proportions, e.g. empirical
    /// per-bag positive fractions from real data.
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct HeteroPiParams {
    pub distribution: HeteroPiDistribution,
}

#[derive(Debug, Clone)]
pub struct SpatialLabelParams {
    /// Lower end of the rescaled local mixing profile.
    pub floor: f64,
    /// Upper end of the rescaled local mixing profile.
    pub ceiling: f64,
    /// Optional bag-specific mixing probability; `None` keeps a constant
    /// `pi_i = pi`.
    pub hetero: Option<HeteroPiDistribution>,
}

impl Default for SpatialLabelParams {
    fn default() -> Self {
        SpatialLabelParams { floor: 0.8, ceiling: 1.0, hetero: None }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialFeatureParams {
    /// Disk radius coefficient: locations live on a disk of radius
    /// `radius_coeff * sqrt(M)`.
    pub radius_coeff: f64,
    /// Correlation range of the exponential kernel.
    pub range: f64,
}

impl Default for SpatialFeatureParams {
    fn default() -> Self {
        SpatialFeatureParams { radius_coeff: 0.03, range: 0.3 }
    }
}

#[derive(Debug, Clone, Default)]
pub enum Regime {
    #[default]
    Base,
    HeteroPi(HeteroPiParams),
    SpatialLabels(SpatialLabelParams),
    SpatialFeatures(SpatialFeatureParams),
    TruncatedLabels,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Base => "base",
            Regime::HeteroPi(_) => "hetero_pi",
            Regime::SpatialLabels(_) => "spatial_labels",
            Regime::SpatialFeatures(_) => "spatial_features",
            Regime::TruncatedLabels => "truncated_labels",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_bags: usize,
    pub bag_size: usize,
    pub alpha: f64,
    pub pi: f64,
    pub mu1: DVector<f64>,
    pub mu0: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Multiplies `sigma` in the generating process.
    pub sigma_scale: f64,
    pub seed: u64,
    pub regime: Regime,
}

/// Kernel guard: spatial-feature bags factorize an `M x M` matrix.
const MAX_SPATIAL_BAG: usize = 5000;

impl SimConfig {
    /// Synthetic default: `mu0 = 0`, `mu1` along the unit diagonal with
    /// the given Euclidean separation, and an AR(1) covariance.
    pub fn synthetic(p: usize, separation: f64, rho: f64) -> Self {
        let mu0 = DVector::zeros(p);
        let mu1 = DVector::from_element(p, separation / (p as f64).sqrt());
        let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
        SimConfig {
            n_bags: 100,
            bag_size: 200,
            alpha: 0.36,
            pi: 0.06,
            mu1,
            mu0,
            sigma,
            sigma_scale: 1.0,
            seed: 42,
            regime: Regime::Base,
        }
    }

    pub fn p(&self) -> usize {
        self.mu1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bags == 0 || self.bag_size == 0 {
            return Err(Error::InvalidConfig("n_bags and bag_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} outside [0,1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidConfig(format!("pi = {} outside [0,1]", self.pi)));
        }
        if self.sigma_scale <= 0.0 {
            return Err(Error::InvalidConfig("sigma_scale must be positive".into()));
        }
        if self.mu0.len() != self.p() {
            return Err(Error::InvalidConfig("mu0 and mu1 dimensions differ".into()));
        }
        if self.sigma.nrows() != self.p() || self.sigma.ncols() != self.p() {
            return Err(Error::InvalidConfig("sigma dimension does not match means".into()));
        }
        match &self.regime {
            Regime::HeteroPi(h) => validate_hetero(&h.distribution, self.pi)?,
            Regime::SpatialLabels(s) => {
                if !(0.0 <= s.floor && s.floor <= s.ceiling && s.ceiling <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "spatial label profile [{}, {}] invalid",
                        s.floor, s.ceiling
                    )));
                }
                if let Some(h) = &s.hetero {
                    validate_hetero(h, self.pi)?;
                }
            }
            Regime::SpatialFeatures(s) => {
                if s.radius_coeff <= 0.0 || s.range <= 0.0 {
                    return Err(Error::InvalidConfig(
                        "spatial feature radius_coeff and range must be positive".into(),
                    ));
                }
                if self.bag_size > MAX_SPATIAL_BAG {
                    return Err(Error::ConfigTooLarge(self.bag_size));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn validate_hetero(dist: &HeteroPiDistribution, pi: f64) -> Result<()> {
    match dist {
        HeteroPiDistribution::BetaWithMean { concentration } => {
            if *concentration <= 0.0 {
                return Err(Error::InvalidConfig("Beta concentration must be positive".into()));
            }
            Ok(())
        }
        HeteroPiDistribution::Empirical(list) => {
            if list.is_empty() {
                return Err(Error::InvalidConfig("empirical pi list is empty".into()));
            }
            if list.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig("empirical pi values outside [0,1]".into()));
            }
            let mean = list.iter().sum::<f64>() / list.len() as f64;
            if (mean - pi).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "empirical pi list mean {mean} does not equal pi = {pi}"
                )));
            }
            Ok(())
        }
    }
}

fn draw_pi_i(dist: &HeteroPiDistribution, pi: f64, rng: &mut impl Rng) -> f64 {
    match dist {
        HeteroPiDistribution::BetaWithMean { concentration } => {
            let a = pi * concentration;
            let b = (1.0 - pi) * concentration;
            let beta = rand_distr::Beta::new(a, b).expect("validated shape parameters");
            rng.sample(beta)
        }
        HeteroPiDistribution::Empirical(list) => {
            let k = rng.random_range(0..list.len());
            list[k]
        }
    }
}

/// Raw spatial mixing profile before rescaling.
fn sinsin(r: [f64; 2]) -> f64 {
    r[0].sin() * r[1].sin()
}

/// (min, max, mean) of `sin(r1) sin(r2)` over the unit disk, computed on
/// a dense grid once per process.
fn sinsin_disk_stats() -> (f64, f64, f64) {
    static STATS: OnceLock<(f64, f64, f64)> = OnceLock::new();
    *STATS.get_or_init(|| {
        let n = 2001;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut count = 0u64;
        for iy in 0..n {
            let y = -1.0 + 2.0 * iy as f64 / (n - 1) as f64;
            for ix in 0..n {
                let x = -1.0 + 2.0 * ix as f64 / (n - 1) as f64;
                if x * x + y * y <= 1.0 {
                    let v = sinsin([x, y]);
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                    count += 1;
                }
            }
        }
        (min, max, sum / count as f64)
    })
}

fn rescaled_profile(r: [f64; 2], floor: f64, ceiling: f64) -> f64 {
    if ceiling == floor {
        return floor;
    }
    let (min, max, _) = sinsin_disk_stats();
    floor + (ceiling - floor) * (sinsin(r) - min) / (max - min)
}

/// Mean of the rescaled profile over the unit disk.
fn mean_profile(floor: f64, ceiling: f64) -> f64 {
    if ceiling == floor {
        return floor;
    }
    let (min, max, mean) = sinsin_disk_stats();
    floor + (ceiling - floor) * (mean - min) / (max - min)
}

fn uniform_disk(radius: f64, rng: &mut impl Rng) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    [r * theta.cos(), r * theta.sin()]
}

/// The parameter values an estimator should recover under a config,
/// accounting for the covariance scale and for regimes that shift the
/// marginal mixing probability.
pub fn effective_truth(config: &SimConfig) -> Result<ModelParams> {
    config.validate()?;
    let pi = match &config.regime {
        Regime::Base | Regime::HeteroPi(_) | Regime::SpatialFeatures(_) => config.pi,
        Regime::SpatialLabels(s) => config.pi * mean_profile(s.floor, s.ceiling),
        Regime::TruncatedLabels => {
            // E(mean label) under the positivity constraint.
            let m = config.bag_size as f64;
            let keep = 1.0 - (1.0 - config.pi).powf(m);
            config.pi / keep
        }
    };
    Ok(ModelParams {
        pi,
        mu1: config.mu1.clone(),
        mu0: config.mu0.clone(),
        sigma: config.sigma_scale * config.sigma.clone(),
        alpha: config.alpha,
    })
}

struct BagCtx<'a> {
    config: &'a SimConfig,
    sigma_factor: &'a SpdFactor,
}

fn gen_labels_iid(m: usize, prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..m).map(|_| rng.random::<f64>() < prob).collect()
}

fn gen_features_iid(
    ctx: &BagCtx,
    labels: &[bool],
    rng: &mut impl Rng,
) -> Vec<DVector<f64>> {
    let p = ctx.config.p();
    let l = ctx.sigma_factor.lower();
    labels
        .iter()
        .map(|&a| {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mu = if a { &ctx.config.mu1 } else { &ctx.config.mu0 };
            mu + l * z
        })
        .collect()
}

fn generate_bag(ctx: &BagCtx, bag_index: usize) -> Result<Bag> {
    let config = ctx.config;
    let m = config.bag_size;
    let seed = config.seed;
    let i = bag_index as u64;

    let y = substream(seed, Stream::BagLabel, i).random::<f64>() < config.alpha;

    let mut labels = vec![false; m];
    let mut locs: Option<Vec<[f64; 2]>> = None;
    let mut label_rng = substream(seed, Stream::InstanceLabels, i);

    if y {
        match &config.regime {
            Regime::Base | Regime::SpatialFeatures(_) => {
                labels = gen_labels_iid(m, config.pi, &mut label_rng);
            }
            Regime::HeteroPi(h) => {
                let mut pi_rng = substream(seed, Stream::MixingProb, i);
                let pi_i = draw_pi_i(&h.distribution, config.pi, &mut pi_rng);
                labels = gen_labels_iid(m, pi_i, &mut label_rng);
            }
            Regime::SpatialLabels(s) => {
                let pi_i = match &s.hetero {
                    Some(dist) => {
                        let mut pi_rng = substream(seed, Stream::MixingProb, i);
                        draw_pi_i(dist, config.pi, &mut pi_rng)
                    }
                    None => config.pi,
                };
                let mut loc_rng = substream(seed, Stream::Locations, i);
                let pts: Vec<[f64; 2]> = (0..m).map(|_| uniform_disk(1.0, &mut loc_rng)).collect();
                labels = pts
                    .iter()
                    .map(|&r| {
                        label_rng.random::<f64>() < pi_i * rescaled_profile(r, s.floor, s.ceiling)
                    })
                    .collect();
                locs = Some(pts);
            }
            Regime::TruncatedLabels => {
                // Exact sampler for the constrained distribution: redraw
                // until the bag holds at least one positive instance.
                loop {
                    labels = gen_labels_iid(m, config.pi, &mut label_rng);
                    if labels.iter().any(|&a| a) {
                        break;
                    }
                }
            }
        }
    } else if matches!(config.regime, Regime::SpatialLabels(_)) {
        let mut loc_rng = substream(seed, Stream::Locations, i);
        locs = Some((0..m).map(|_| uniform_disk(1.0, &mut loc_rng)).collect());
    }

    let mut feat_rng = substream(seed, Stream::Features, i);
    let features = match &config.regime {
        Regime::SpatialFeatures(s) => {
            let radius = s.radius_coeff * (m as f64).sqrt();
            let mut loc_rng = substream(seed, Stream::Locations, i);
            let pts: Vec<[f64; 2]> = (0..m).map(|_| uniform_disk(radius, &mut loc_rng)).collect();
            let features = gen_features_spatial(ctx, &labels, &pts, s.range, &mut feat_rng)?;
            locs = Some(pts);
            features
        }
        _ => gen_features_iid(ctx, &labels, &mut feat_rng),
    };

    let instances = (0..m)
        .map(|mi| Instance {
            instance_id: mi.to_string(),
            x: features[mi].clone(),
            a: InstanceLabel::from_indicator(labels[mi]),
            s: false,
            loc: locs.as_ref().map(|l| l[mi]),
        })
        .collect();

    Ok(Bag { bag_id: bag_index.to_string(), y, instances })
}

/// Draws the bag's noise block as `L_K Z L_Sigma'` where `K` is the
/// exponential kernel over pairwise location distances.
fn gen_features_spatial(
    ctx: &BagCtx,
    labels: &[bool],
    pts: &[[f64; 2]],
    range: f64,
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>> {
    let m = labels.len();
    let p = ctx.config.p();
    let kernel = DMatrix::from_fn(m, m, |a, b| {
        let dx = pts[a][0] - pts[b][0];
        let dy = pts[a][1] - pts[b][1];
        (-(dx * dx + dy * dy).sqrt() / range).exp()
    });
    let kf = spd_factorize_default(&kernel).map_err(|_| Error::KernelNotFactorizable)?;
    // Z in instance-major order so the independence limit reproduces the
    // base regime draw for draw.
    let mut z = DMatrix::zeros(m, p);
    for mi in 0..m {
        for j in 0..p {
            z[(mi, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let noise = kf.lower() * z * ctx.sigma_factor.lower().transpose();
    Ok(labels
        .iter()
        .enumerate()
        .map(|(mi, &a)| {
            let mu = if a { &ctx.config.mu1 } else { &ctx.config.mu0 };
            mu + noise.row(mi).transpose()
        })
        .collect())
}

fn generate(config: &SimConfig) -> Result<BagDataset> {
    config.validate()?;
    let scaled_sigma = config.sigma_scale * config.sigma.clone();
    let sigma_factor = spd_factorize_default(&scaled_sigma)?;
    let ctx = BagCtx { config, sigma_factor: &sigma_factor };
    let bags = (0..config.n_bags)
        .map(|i| generate_bag(&ctx, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(BagDataset::new(bags, config.p()))
}

/// Generates a dataset under any regime; dispatches on `config.regime`.
pub fn simulate(config: &SimConfig) -> Result<BagDataset> {
    generate(config)
}

fn expect_regime(config: &SimConfig, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "regime is {}, expected {name}",
            config.regime.name()
        )))
    }
}

/// Base regime with a bag-specific mixing probability drawn per positive
/// bag.
pub fn simulate_hetero_pi(config: &SimConfig) -> Result<BagDataset> {
    expect_regime(config, matches!(config.regime, Regime::HeteroPi(_)), "hetero_pi")?;
    generate(config)
}

/// Labels modulated by a smooth spatial profile over the unit disk.
pub fn simulate_spatial_labels(config: &SimConfig) -> Result<BagDataset> {
    expect_regime(config, matches!(config.regime, Regime::SpatialLabels(_)), "spatial_labels")?;
    generate(config)
}

/// Features drawn from a bag-specific Gaussian random field with an
/// exponential spatial kernel.
pub fn simulate_spatial_features(config: &SimConfig) -> Result<BagDataset> {
    expect_regime(
        config,
        matches!(config.regime, Regime::SpatialFeatures(_)),
        "spatial_features",
    )?;
    generate(config)
}

/// Positive bags redrawn until they contain at least one positive
/// instance (exact sampler for the truncated label distribution).
pub fn simulate_truncated_labels(config: &SimConfig) -> Result<BagDataset> {
    expect_regime(config, matches!(config.regime, Regime::TruncatedLabels), "truncated_labels")?;
    generate(config)
}
