//! Subsample-based maximum likelihood estimation.
//!
//! The objective augments the bag likelihood with a conditional term for
//! every revealed instance: `S * (A log pi_im + (1-A) log(1-pi_im))`
//! where `pi_im` is the instance posterior. Because
//! `log mixture + A log pi_im + (1-A) log(1-pi_im)` collapses to
//! `A log(pi phi1) + (1-A) log((1-pi) phi0)`, revealed instances become
//! complete-data terms and the EM simply clamps their responsibilities
//! to the revealed label. Both subsampling limits are then exact: with
//! nothing revealed the fit is the bag-based EM step for step, and with
//! everything revealed the first M-step lands on the closed-form
//! instance-based estimate.

use crate::bmle::{run_em, EmOptions};
use crate::error::{Error, Result};
use crate::model::{BagDataset, EstimatorKind, FitResult, ModelParams};

fn check_subsample_consistency(dataset: &BagDataset) -> Result<()> {
    for bag in &dataset.bags {
        for inst in &bag.instances {
            if inst.s && !bag.y {
                return Err(Error::InconsistentSubsample(format!(
                    "bag {} instance {}: s=1 inside a negative bag",
                    bag.bag_id, inst.instance_id
                )));
            }
            if inst.s && !inst.a.is_observed() {
                return Err(Error::InconsistentSubsample(format!(
                    "bag {} instance {}: s=1 but label unobserved",
                    bag.bag_id, inst.instance_id
                )));
            }
        }
    }
    Ok(())
}

/// Combined log-likelihood of bag labels and revealed instance labels.
pub fn sub_loglik(params: &ModelParams, dataset: &BagDataset) -> Result<f64> {
    if params.p() != dataset.p {
        return Err(Error::DimensionMismatch { expected: dataset.p, got: params.p() });
    }
    check_subsample_consistency(dataset)?;
    crate::bmle::loglik_with_subsample(params, dataset)
}

/// EM fit from bag labels plus the revealed subsample.
pub fn fit_smle(dataset: &BagDataset, options: &EmOptions) -> Result<FitResult> {
    check_subsample_consistency(dataset)?;
    run_em(dataset, options, true, EstimatorKind::Smle)
}
