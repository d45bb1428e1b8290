//! Property tests over randomized inputs.

use gmmil::linalg::{duplication_matrix, unvech, vech};
use gmmil::metrics::{bag_positive_prob, binary_metrics};
use gmmil::model::{flatten, param_len, unflatten, ModelParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn symmetric_matrix(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-5.0f64..5.0, p * (p + 1) / 2)
        .prop_map(move |v| unvech(&v, p))
}

fn spd_params(p: usize) -> impl Strategy<Value = ModelParams> {
    (
        0.05f64..0.95,
        proptest::collection::vec(-3.0f64..3.0, p),
        proptest::collection::vec(-3.0f64..3.0, p),
        proptest::collection::vec(-0.8f64..0.8, p * p),
    )
        .prop_map(move |(pi, mu1, mu0, a)| {
            let a = DMatrix::from_vec(p, p, a);
            let mut sigma = &a * a.transpose();
            for i in 0..p {
                sigma[(i, i)] += 1.0 + 0.5 * p as f64;
            }
            ModelParams {
                pi,
                mu1: DVector::from_vec(mu1),
                mu0: DVector::from_vec(mu0),
                sigma,
                alpha: 0.5,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplication_reconstructs_vec_exactly(p in 1usize..=6, seed in any::<u64>()) {
        // Random symmetric matrix via the seeded vech.
        let len = p * (p + 1) / 2;
        let vals: Vec<f64> = (0..len)
            .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 500.0 - 1.0)
            .collect();
        let b = unvech(&vals, p);
        let d = duplication_matrix(p);
        let full = d.apply_vech(&vech(&b));
        for j in 0..p {
            for i in 0..p {
                prop_assert_eq!(full[j * p + i], b[(i, j)]);
            }
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip(params in spd_params(3)) {
        let theta = flatten(&params).unwrap();
        prop_assert_eq!(theta.len(), param_len(3));
        let back = unflatten(&theta, 3, params.alpha).unwrap();
        prop_assert!((back.pi - params.pi).abs() < 1e-10);
        prop_assert!((&back.mu1 - &params.mu1).amax() < 1e-10);
        prop_assert!((&back.mu0 - &params.mu0).amax() < 1e-10);
        prop_assert!((&back.sigma - &params.sigma).amax() < 1e-8);
    }

    #[test]
    fn symmetric_vech_roundtrip(m in symmetric_matrix(4)) {
        prop_assert_eq!(unvech(&vech(&m), 4), m);
    }

    #[test]
    fn auc_invariant_under_affine_score_transform(
        scores in proptest::collection::vec(0.0f64..1.0, 2..12),
        labels in proptest::collection::vec(any::<bool>(), 12),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let labels = &labels[..scores.len()];
        let transformed: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        let a = binary_metrics(&scores, labels, 0.5).unwrap().auc;
        let b = binary_metrics(&transformed, labels, 0.5).unwrap().auc;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bag_probability_bounded_and_monotone(
        probs in proptest::collection::vec(0.0f64..1.0, 1..30),
        bump_idx in any::<prop::sample::Index>(),
    ) {
        let base = bag_positive_prob(&probs);
        prop_assert!((0.0..=1.0).contains(&base));
        let k = bump_idx.index(probs.len());
        let mut bumped = probs.clone();
        bumped[k] = (bumped[k] + 0.1).min(1.0);
        prop_assert!(bag_positive_prob(&bumped) >= base - 1e-12);
    }
}
